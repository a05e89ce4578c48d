//! The `ct-harness` command line.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage error.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::*;
pub use config::RunConfig;

use crate::corpus::{EmojiPolicy, FooterPolicy, InputFormat, SplitRatios};
use crate::eval::{EvalReport, Objective};
use crate::prompt_kit::{DefinitionVariant, Task};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ct-harness", version, about = "Evaluate conspiracy-theory classifiers on annotated message corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest, clean, label, filter and split an annotated corpus.
    Prepare(PrepareArgs),
    /// Draw stratified few-shot example sets from a split.
    Sample(SampleArgs),
    /// Classify a split with a model (or a replay fixture).
    Run(RunArgs),
    /// Re-execute a recorded run from a fixture, by default its own ledger.
    Replay(ReplayArgs),
    /// Wrap an external prediction file as a run.
    Import(ImportArgs),
    /// Pick a probability threshold on a (validation) run.
    Calibrate(CalibrateArgs),
    /// Score a run against gold labels.
    Evaluate(EvaluateArgs),
    /// McNemar test and disagreement between two runs.
    Compare(CompareArgs),
    /// Mean and SD over evaluation reports, optionally with a t test.
    Aggregate(AggregateArgs),
    /// Fragmentation breakdown and channel-level report.
    Analyze(AnalyzeArgs),
    /// Prompt template utilities.
    #[command(subcommand)]
    Prompts(PromptsCommand),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in experiment preset, e.g. `zs-binary-custom-gpt4`.
    #[arg(long)]
    pub preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path),
            (None, Some(name)) => RunConfig::preset(name).ok_or_else(|| {
                Error::Invalid(format!("unknown preset `{name}`; known: {}", RunConfig::preset_names().join(", ")))
            }),
            (None, None) => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EmojiArg {
    Keep,
    Strip,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Output directory for split files and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train, validation and test ratios, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_parser = parse_ratios)]
    pub ratios: Option<SplitRatios>,
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long, value_enum)]
    pub emoji: Option<EmojiArg>,
    /// Minimum recurrences per channel for a trailing block to count as a footer.
    #[arg(long, conflicts_with = "keep_footers")]
    pub footer_min_count: Option<usize>,
    #[arg(long)]
    pub keep_footers: bool,
}

fn parse_ratios(s: &str) -> std::result::Result<SplitRatios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [train, validation, test] = parts[..] else {
        return Err("expected three comma-separated ratios".into());
    };
    let r = SplitRatios { train, validation, test };
    r.validate().map_err(|e| e.to_string())?;
    Ok(r)
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Prepared data directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub sets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (default `<data>/fewshot_sets.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, value_enum)]
    pub definition: Option<DefinitionVariant>,
    /// Model profile: gpt35, gpt4 or llama2.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Restrict output to one of these single tokens, e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    pub constrain_tokens: Option<Vec<String>>,
    /// Few-shot sets file written by `sample`.
    #[arg(long)]
    pub few_shot: Option<PathBuf>,
    #[arg(long)]
    pub set_index: Option<usize>,
    /// Serve outputs from this fixture instead of calling the endpoint.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Only the first N items of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Recorded run directory.
    pub run: PathBuf,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// JSONL with `message_id` and `label` or `score`.
    pub file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "runs")]
    pub outdir: PathBuf,
    #[arg(long)]
    pub run_id: String,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long, conflicts_with = "calibration")]
    pub threshold: Option<f64>,
    /// Calibration file written by `calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

impl ThresholdArgs {
    fn resolve(&self) -> Result<Option<f64>> {
        resolve_threshold(self.threshold, self.calibration.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub run: PathBuf,
    /// Data directory, if different from the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Objective::F1Positive)]
    pub objective: Objective,
    /// Output file (default `<run>/calibration.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    /// Count unparsable outputs as negative instead of excluding them.
    #[arg(long)]
    pub strict: bool,
    /// Output file (default `<run>/report.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threshold_a: Option<f64>,
    #[arg(long)]
    pub calibration_a: Option<PathBuf>,
    #[arg(long)]
    pub threshold_b: Option<f64>,
    #[arg(long)]
    pub calibration_b: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Evaluation reports of the first model.
    #[arg(long, num_args = 1.., required = true)]
    pub a: Vec<PathBuf>,
    /// Evaluation reports of a second model; enables the t test.
    #[arg(long, num_args = 1..)]
    pub b: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "f1_1")]
    pub metric: String,
    /// Paired t test over matching runs instead of Welch.
    #[arg(long)]
    pub paired: bool,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_MIN_MESSAGES)]
    pub min_messages: usize,
    /// Also write channel rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Output file (default `<run>/analysis.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PromptsCommand {
    /// Print every template with literal placeholders.
    Dump {
        /// Also write templates.txt and templates.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn pick<T>(flag: Option<T>, config: &mut T) {
    if let Some(v) = flag {
        *config = v;
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Prepare(a) => {
            let mut cfg = a.config.load()?;
            if a.input.is_some() {
                cfg.corpus.input = a.input;
            }
            if a.format.is_some() {
                cfg.corpus.format = a.format;
            }
            pick(a.seed, &mut cfg.split.seed);
            pick(a.ratios, &mut cfg.split.ratios);
            pick(a.min_tokens, &mut cfg.corpus.min_tokens);
            if a.no_stratify {
                cfg.split.stratify = false;
            }
            if let Some(e) = a.emoji {
                cfg.preprocess.emoji = match e {
                    EmojiArg::Keep => EmojiPolicy::Keep,
                    EmojiArg::Strip => EmojiPolicy::Strip,
                };
            }
            if a.keep_footers {
                cfg.preprocess.footers = FooterPolicy::Keep;
            }
            if let Some(n) = a.footer_min_count {
                cfg.preprocess.footers = FooterPolicy::Remove { min_count: n };
            }
            let m = prepare(&cfg, &a.out)?;
            for (name, c) in &m.counts {
                println!("{name:<10} {:>6} negative {:>6} positive {:>6} total", c.negative, c.positive, c.total);
            }
        }
        Command::Sample(a) => {
            let mut cfg = a.config.load()?;
            pick(a.split, &mut cfg.sampler.source_split);
            pick(a.sets, &mut cfg.sampler.sets);
            pick(a.seed, &mut cfg.sampler.seed);
            let out = a.out.unwrap_or_else(|| a.data.join("fewshot_sets.json"));
            let sets = sample(&a.data, &cfg.sampler.source_split, cfg.sampler.sets, cfg.sampler.seed, &out)?;
            println!("wrote {} few-shot sets to {}", sets.len(), out.display());
        }
        Command::Run(a) => {
            let mut cfg = a.config.load()?;
            pick(a.split, &mut cfg.output.split);
            pick(a.task, &mut cfg.prompt.task);
            pick(a.definition, &mut cfg.prompt.definition);
            pick(a.model, &mut cfg.model.profile);
            pick(a.outdir, &mut cfg.output.dir);
            pick(a.set_index, &mut cfg.sampler.set_index);
            if a.endpoint.is_some() {
                cfg.model.endpoint = a.endpoint;
            }
            if a.max_in_flight.is_some() {
                cfg.model.max_in_flight = a.max_in_flight;
            }
            pick(a.constrain_tokens, &mut cfg.model.constrain_tokens);
            if cfg.prompt.task == Task::FewShotBinary {
                cfg.prompt.definition = DefinitionVariant::None;
            }
            let mut settings = RunSettings::from_config(&cfg, &a.data)?;
            settings.few_shot = a.few_shot.map(|sets| FewShotRef {
                sets,
                set_index: cfg.sampler.set_index,
            });
            settings.limit = a.limit;
            let run_id = a.run_id.unwrap_or_else(|| settings.default_run_id());
            let m = execute_run(&settings, &cfg, &run_id, &cfg.output.dir, a.fixture.as_deref())?;
            print_run(&m, &cfg.output.dir);
        }
        Command::Replay(a) => {
            let outdir = a.outdir.unwrap_or_else(|| a.run.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let m = replay_run(&a.run, a.fixture.as_deref(), &outdir, a.run_id.as_deref())?;
            print_run(&m, &outdir);
        }
        Command::Import(a) => {
            let m = import_run(&a.file, &a.data, &a.split, &a.outdir, &a.run_id)?;
            println!("imported {} predictions into {}", m.parse_status.values().sum::<usize>(), a.outdir.join(&m.run_id).display());
        }
        Command::Calibrate(a) => {
            let run = LoadedRun::load(&a.run)?;
            let r = calibrate(&run, a.data.as_deref(), a.objective)?;
            let out = a.out.unwrap_or_else(|| a.run.join("calibration.json"));
            write_json(&out, &r)?;
            println!("threshold {} ({:?} = {:.4}, F1_1 = {:.4})", r.threshold, r.objective, r.objective_value, r.f1_at_threshold);
        }
        Command::Evaluate(a) => {
            let run = LoadedRun::load(&a.run)?;
            let report = evaluate_run(&run, a.data.as_deref(), a.threshold.resolve()?, a.strict)?;
            write_json(&a.out.unwrap_or_else(|| a.run.join("report.json")), &report)?;
            print!("{}", render_report(&report));
        }
        Command::Compare(a) => {
            let ra = LoadedRun::load(&a.run_a)?;
            let rb = LoadedRun::load(&a.run_b)?;
            let ta = resolve_threshold(a.threshold_a, a.calibration_a.as_deref())?;
            let tb = resolve_threshold(a.threshold_b, a.calibration_b.as_deref())?;
            let report = compare(&ra, &rb, ta, tb, a.data.as_deref(), a.alpha)?;
            match a.out {
                Some(path) => {
                    write_json(&path, &report)?;
                    let m = &report.mcnemar;
                    println!(
                        "{} vs {}: n={} b={} c={} {:?} p={:.4} disagreement={:.3}",
                        report.run_a, report.run_b, report.n, report.pairs.n10, report.pairs.n01,
                        m.method, m.p_value, report.disagreement.rate
                    );
                }
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Aggregate(a) => {
            let load = |paths: &[PathBuf]| -> Result<Vec<EvalReport>> { paths.iter().map(|p| read_json(p)).collect() };
            let ra = load(&a.a)?;
            let rb = a.b.as_deref().map(load).transpose()?;
            let report = aggregate(&ra, rb.as_deref(), &a.metric, a.paired, a.alpha)?;
            match a.out {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Analyze(a) => {
            let run = LoadedRun::load(&a.run)?;
            let report = analyze(&run, a.data.as_deref(), a.threshold.resolve()?, a.min_messages)?;
            if let Some(csv) = &a.csv {
                report.channels.write_csv(csv)?;
            }
            write_json(&a.out.unwrap_or_else(|| a.run.join("analysis.json")), &report)?;
            print!("{}\n{}", report.fragmentation.render(), report.channels.render());
        }
        Command::Prompts(PromptsCommand::Dump { out }) => {
            print!("{}", dump_prompts(out.as_deref())?);
        }
    }
    Ok(())
}

fn print_run(m: &RunManifest, outdir: &Path) {
    println!(
        "run {} -> {}: {} prompts, {} transport errors, parse status {:?}",
        m.run_id,
        outdir.join(&m.run_id).display(),
        m.n_prompts,
        m.transport_errors,
        m.parse_status
    );
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let mut shown = e.to_string();
            eprintln!("error: {shown}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                    shown = text;
                }
                source = s.source();
            }
            EXIT_FAILURE
        }
    }
}
