use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::analysis::{breakdown_by_fragmentation, channel_report, ChannelReport, FragmentationBreakdown};
use crate::corpus::{
    dedupe, filter_short, ingest, preprocess_corpus, read_examples, split, write_examples, ClassCounts, InputFormat,
    LabeledExample, Message, Record,
};
use crate::eval::{evaluate, optimize_threshold, render_table, EvalOptions, EvalReport, ThresholdResult};
use crate::gateway::{
    classify_batch, constrained_single_token, import_predictions, total_usage, HttpTransport, ModelProfile,
    ModelResponse, RetryPolicy, RunLedger, TokenUsage, Transport,
};
use crate::parsers::{ParseStatus, Prediction};
use crate::prompt_kit::{dump_templates, render, PromptSpec, RenderedPrompt, Task};
use crate::sampler::{build_few_shot_sets, FewShotSet};
use crate::stats::{aggregate_runs, disagreement, mcnemar, paired_t, welch_t, Disagreement, MeanSd, PairedOutcomes, TestResult};
use crate::{Error, Label, Result};

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("rows serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub config: RunConfig,
    pub input: PathBuf,
    pub ingested: usize,
    /// Messages without annotation or with an excluded label.
    pub unlabeled: usize,
    pub too_short: usize,
    pub duplicates: usize,
    pub footer_blocks: usize,
    pub counts: BTreeMap<String, ClassCounts>,
}

pub fn prepare(config: &RunConfig, out: &Path) -> Result<PrepareManifest> {
    let input = config
        .corpus
        .input
        .clone()
        .ok_or_else(|| Error::Invalid("no input corpus given (--input or [corpus] input)".into()))?;
    let format = match config.corpus.format {
        Some(f) => f,
        None => InputFormat::from_path(&input)
            .ok_or_else(|| Error::Invalid(format!("cannot infer format of {}; pass --format", input.display())))?,
    };
    let records = ingest(&input, format)?;
    let raw: Vec<Message> = records.iter().map(|r| r.message.clone()).collect();
    let (cleaned, footers) = preprocess_corpus(&raw, &config.preprocess);

    let mut labeled = Vec::new();
    for (record, message) in records.into_iter().zip(&cleaned) {
        let record = Record {
            message: message.clone(),
            annotation: record.annotation,
        };
        if let Some(e) = LabeledExample::from_record(record)? {
            labeled.push(e);
        }
    }
    let unlabeled = cleaned.len() - labeled.len();
    let before_short = labeled.len();
    let labeled = filter_short(labeled, config.corpus.min_tokens);
    let too_short = before_short - labeled.len();
    let before_dedupe = labeled.len();
    let labeled = dedupe(labeled);
    let duplicates = before_dedupe - labeled.len();

    let parts = split(&labeled, config.split.ratios, config.split.seed, config.split.stratify)?;
    create_dir(out)?;
    for name in SPLITS {
        write_examples(&out.join(format!("{name}.jsonl")), parts.part(name).expect("known split"))?;
    }
    write_jsonl(&out.join("messages.jsonl"), &cleaned)?;
    let manifest = PrepareManifest {
        config: config.clone(),
        input,
        ingested: cleaned.len(),
        unlabeled,
        too_short,
        duplicates,
        footer_blocks: footers.footer_count(),
        counts: parts.counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_split(data: &Path, name: &str) -> Result<Vec<LabeledExample>> {
    if !SPLITS.contains(&name) {
        return Err(Error::Invalid(format!("unknown split `{name}`; expected train, validation or test")));
    }
    Ok(read_examples(&data.join(format!("{name}.jsonl")))?)
}

// ---------------------------------------------------------------- sample

pub fn sample(data: &Path, source_split: &str, n_sets: usize, seed: u64, out: &Path) -> Result<Vec<FewShotSet>> {
    let pool = load_split(data, source_split)?;
    let sets = build_few_shot_sets(&pool, n_sets, seed, source_split)?;
    write_json(out, &sets)?;
    Ok(sets)
}

// ---------------------------------------------------------------- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRef {
    pub sets: PathBuf,
    pub set_index: usize,
}

/// Everything needed to re-render a run's prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub data: PathBuf,
    pub split: String,
    pub spec: PromptSpec,
    pub profile: ModelProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<FewShotRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl RunSettings {
    pub fn from_config(config: &RunConfig, data: &Path) -> Result<Self> {
        let mut profile = ModelProfile::preset(&config.model.profile)?;
        if let Some(endpoint) = &config.model.endpoint {
            profile.endpoint = url::Url::parse(endpoint).map_err(|e| Error::Invalid(format!("endpoint `{endpoint}`: {e}")))?;
        }
        if let Some(n) = config.model.max_in_flight {
            profile.max_in_flight = n.max(1);
        }
        if !config.model.constrain_tokens.is_empty() {
            profile = constrained_single_token(&profile, &config.model.constrain_tokens)?;
        }
        let spec = PromptSpec::new(config.prompt.task, config.prompt.definition, profile.dialect);
        spec.validate()?;
        Ok(RunSettings {
            data: data.to_path_buf(),
            split: config.output.split.clone(),
            spec,
            profile,
            few_shot: None,
            limit: None,
        })
    }

    pub fn default_run_id(&self) -> String {
        let mut id = format!("{}-{}-{}-{}", self.spec.task, self.spec.definition, self.profile.name, self.split);
        if let Some(fs) = &self.few_shot {
            id.push_str(&format!("-set{}", fs.set_index));
        }
        id
    }

    pub fn prompts(&self) -> Result<Vec<RenderedPrompt>> {
        let mut examples = load_split(&self.data, &self.split)?;
        if let Some(limit) = self.limit {
            examples.truncate(limit);
        }
        let set = match (&self.few_shot, self.spec.task) {
            (Some(fs), Task::FewShotBinary) => {
                let sets: Vec<FewShotSet> = read_json(&fs.sets)?;
                let set = sets
                    .into_iter()
                    .find(|s| s.set_index == fs.set_index)
                    .ok_or_else(|| Error::Invalid(format!("{} has no set {}", fs.sets.display(), fs.set_index)))?;
                Some(set)
            }
            (None, Task::FewShotBinary) => return Err(Error::Invalid("few-shot runs need --few-shot <sets.json>".into())),
            _ => None,
        };
        examples
            .iter()
            .map(|e| render(&e.message, &self.spec, set.as_ref()).map_err(Error::from))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub settings: RunSettings,
    pub config: RunConfig,
    pub n_prompts: usize,
    pub transport_errors: usize,
    pub parse_status: BTreeMap<String, usize>,
    pub token_usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
}

pub fn predictions_from(responses: &[ModelResponse], task: Task) -> Vec<Prediction> {
    responses
        .iter()
        .map(|r| match &r.error {
            None => Prediction::from_raw(&r.message_id, &r.raw_output, task),
            Some(_) => Prediction {
                message_id: r.message_id.clone(),
                verdict: None,
                raw_output: r.raw_output.clone(),
                parse_status: ParseStatus::Failed,
            },
        })
        .collect()
}

fn status_counts(preds: &[Prediction]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in preds {
        let key = serde_json::to_value(p.parse_status).expect("status serializes");
        *out.entry(key.as_str().unwrap_or_default().to_string()).or_insert(0) += 1;
    }
    out
}

/// Executes a run into `<outdir>/<run_id>/`: manifest, ledger and predictions.
pub fn execute_run(settings: &RunSettings, config: &RunConfig, run_id: &str, outdir: &Path, fixture: Option<&Path>) -> Result<RunManifest> {
    let prompts = settings.prompts()?;
    let dir = outdir.join(run_id);
    create_dir(&dir)?;
    let mut ledger = RunLedger::create(&dir.join("ledger.jsonl"), run_id, settings.profile.clone(), settings.spec.clone())?;
    let responses = match fixture {
        Some(f) => crate::gateway::replay(f, &prompts, &mut ledger)?,
        None => {
            let transport: Box<dyn Transport> = Box::new(HttpTransport::new(&settings.profile)?);
            classify_batch(&prompts, &settings.profile, transport.as_ref(), &mut ledger, &RetryPolicy::default())?
        }
    };
    let predictions = predictions_from(&responses, settings.spec.task);
    write_jsonl(&dir.join("predictions.jsonl"), &predictions)?;
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        settings: settings.clone(),
        config: config.clone(),
        n_prompts: prompts.len(),
        transport_errors: responses.iter().filter(|r| r.error.is_some()).count(),
        parse_status: status_counts(&predictions),
        token_usage: total_usage(&responses),
        fixture: fixture.map(Path::to_path_buf),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Re-executes a recorded run from a fixture (by default its own ledger).
pub fn replay_run(run_dir: &Path, fixture: Option<&Path>, outdir: &Path, run_id: Option<&str>) -> Result<RunManifest> {
    let manifest: RunManifest = read_json(&run_dir.join("manifest.json"))?;
    let own_ledger = run_dir.join("ledger.jsonl");
    let fixture = fixture.unwrap_or(&own_ledger);
    let id = run_id.map_or_else(|| format!("{}-replay", manifest.run_id), str::to_string);
    execute_run(&manifest.settings, &manifest.config, &id, outdir, Some(fixture))
}

/// Wraps an external prediction file as a run directory.
pub fn import_run(file: &Path, data: &Path, split_name: &str, outdir: &Path, run_id: &str) -> Result<RunManifest> {
    let gold = load_split(data, split_name)?;
    let known: HashSet<String> = gold.iter().map(|g| g.id().to_string()).collect();
    let predictions = import_predictions(file, Some(&known))?;
    let dir = outdir.join(run_id);
    create_dir(&dir)?;
    write_jsonl(&dir.join("predictions.jsonl"), &predictions)?;
    let task = if predictions.iter().any(|p| matches!(p.verdict, Some(crate::parsers::Verdict::Score(_)))) {
        Task::ZeroShotProbabilistic
    } else {
        Task::ZeroShotBinary
    };
    let mut config = RunConfig::default();
    config.output.split = split_name.to_string();
    let mut profile = ModelProfile::gpt4();
    profile.name = "external".into();
    profile.model = "external".into();
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        settings: RunSettings {
            data: data.to_path_buf(),
            split: split_name.to_string(),
            spec: PromptSpec::new(task, crate::prompt_kit::DefinitionVariant::None, profile.dialect),
            profile,
            few_shot: None,
            limit: None,
        },
        config,
        n_prompts: 0,
        transport_errors: 0,
        parse_status: status_counts(&predictions),
        token_usage: TokenUsage::default(),
        fixture: None,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- run artifacts

pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub predictions: Vec<Prediction>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(LoadedRun {
            dir: dir.to_path_buf(),
            manifest: read_json(&dir.join("manifest.json"))?,
            predictions: read_jsonl(&dir.join("predictions.jsonl"))?,
        })
    }

    pub fn gold(&self, data: Option<&Path>) -> Result<Vec<LabeledExample>> {
        let data = data.unwrap_or(&self.manifest.settings.data);
        let mut gold = load_split(data, &self.manifest.settings.split)?;
        if let Some(limit) = self.manifest.settings.limit {
            gold.truncate(limit);
        }
        Ok(gold)
    }

    pub fn data_dir<'a>(&'a self, data: Option<&'a Path>) -> &'a Path {
        data.unwrap_or(&self.manifest.settings.data)
    }

    pub fn is_probabilistic(&self) -> bool {
        self.manifest.settings.spec.task.is_probabilistic()
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let s = &self.manifest.settings;
        let mut m = BTreeMap::from([
            ("run_id".to_string(), self.manifest.run_id.clone()),
            ("task".to_string(), s.spec.task.to_string()),
            ("definition".to_string(), s.spec.definition.to_string()),
            ("model".to_string(), s.profile.model.clone()),
            ("split".to_string(), s.split.clone()),
        ]);
        if let Some(fs) = &s.few_shot {
            m.insert("few_shot_set".into(), fs.set_index.to_string());
        }
        m
    }
}

/// Threshold from an explicit value or a calibration file.
pub fn resolve_threshold(threshold: Option<f64>, calibration: Option<&Path>) -> Result<Option<f64>> {
    match (threshold, calibration) {
        (Some(t), _) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Invalid(format!("threshold {t} outside [0, 1]")));
            }
            Ok(Some(t))
        }
        (None, Some(path)) => Ok(Some(read_json::<ThresholdResult>(path)?.threshold)),
        (None, None) => Ok(None),
    }
}

// ---------------------------------------------------------------- calibrate / evaluate

pub fn calibrate(run: &LoadedRun, data: Option<&Path>, objective: crate::eval::Objective) -> Result<ThresholdResult> {
    let gold = run.gold(data)?;
    let by_id: HashMap<&str, &Prediction> = run.predictions.iter().map(|p| (p.message_id.as_str(), p)).collect();
    let scored: Vec<(f64, Label)> = gold
        .iter()
        .filter_map(|g| by_id.get(g.id()).and_then(|p| p.verdict).and_then(|v| v.score()).map(|s| (s, g.label)))
        .collect();
    if scored.is_empty() {
        return Err(Error::Invalid(format!("run `{}` has no probability scores to calibrate", run.manifest.run_id)));
    }
    Ok(optimize_threshold(&scored, objective)?)
}

pub fn evaluate_run(run: &LoadedRun, data: Option<&Path>, threshold: Option<f64>, strict: bool) -> Result<EvalReport> {
    let gold = run.gold(data)?;
    let mut report = evaluate(&gold, &run.predictions, EvalOptions { threshold, strict })?;
    report.run = run.meta();
    Ok(report)
}

pub fn render_report(report: &EvalReport) -> String {
    let name = report.run.get("run_id").map_or("run", String::as_str);
    render_table(&[(name, report)])
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub n: usize,
    /// Items left out because either run had no usable verdict.
    pub excluded: usize,
    pub pairs: PairedOutcomes,
    pub mcnemar: TestResult,
    pub disagreement: Disagreement,
}

fn labels_by_id(run: &LoadedRun, threshold: Option<f64>) -> Result<HashMap<String, Option<Label>>> {
    let mut out = HashMap::new();
    for p in &run.predictions {
        if let (Some(crate::parsers::Verdict::Score(_)), None) = (p.verdict, threshold) {
            return Err(Error::Invalid(format!(
                "run `{}` has probability scores; pass a threshold or calibration",
                run.manifest.run_id
            )));
        }
        out.insert(p.message_id.clone(), p.label(threshold));
    }
    Ok(out)
}

pub fn compare(a: &LoadedRun, b: &LoadedRun, ta: Option<f64>, tb: Option<f64>, data: Option<&Path>, alpha: f64) -> Result<CompareReport> {
    let gold = a.gold(data)?;
    let la = labels_by_id(a, ta)?;
    let lb = labels_by_id(b, tb)?;
    let mut g = Vec::new();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    let mut missing = Vec::new();
    for item in &gold {
        let (Some(pa), Some(pb)) = (la.get(item.id()), lb.get(item.id())) else {
            missing.push(item.id().to_string());
            continue;
        };
        match (pa, pb) {
            (Some(pa), Some(pb)) => {
                g.push(item.label);
                xa.push((item.id(), *pa));
                xb.push((item.id(), *pb));
            }
            _ => excluded += 1,
        }
    }
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "runs do not cover the same items; missing predictions for: {}",
            missing.join(", ")
        )));
    }
    let only = |v: &[(&str, Label)]| v.iter().map(|x| x.1).collect::<Vec<_>>();
    let pairs = PairedOutcomes::from_labels(&g, &only(&xa), &only(&xb))?;
    Ok(CompareReport {
        run_a: a.manifest.run_id.clone(),
        run_b: b.manifest.run_id.clone(),
        n: g.len(),
        excluded,
        pairs,
        mcnemar: mcnemar(&pairs, alpha)?,
        disagreement: disagreement(&xa, &xb)?,
    })
}

// ---------------------------------------------------------------- aggregate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub a: BTreeMap<String, MeanSd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<BTreeMap<String, MeanSd>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestResult>,
}

pub fn aggregate(a: &[EvalReport], b: Option<&[EvalReport]>, metric: &str, paired: bool, alpha: f64) -> Result<AggregateReport> {
    let agg_a = aggregate_runs(a)?;
    let Some(b) = b else {
        return Ok(AggregateReport {
            a: agg_a,
            b: None,
            metric: None,
            test: None,
        });
    };
    let agg_b = aggregate_runs(b)?;
    let values = |reports: &[EvalReport]| -> Result<Vec<f64>> {
        reports
            .iter()
            .map(|r| {
                r.metric_map()
                    .get(metric)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("unknown metric `{metric}`")))
            })
            .collect()
    };
    let (va, vb) = (values(a)?, values(b)?);
    let test = if paired { paired_t(&va, &vb, alpha)? } else { welch_t(&va, &vb, alpha)? };
    Ok(AggregateReport {
        a: agg_a,
        b: Some(agg_b),
        metric: Some(metric.to_string()),
        test: Some(test),
    })
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub run_id: String,
    pub fragmentation: FragmentationBreakdown,
    pub channels: ChannelReport,
}

pub fn analyze(run: &LoadedRun, data: Option<&Path>, threshold: Option<f64>, min_messages: usize) -> Result<AnalysisReport> {
    let gold = run.gold(data)?;
    let messages: Vec<Message> = read_jsonl(&run.data_dir(data).join("messages.jsonl"))?;
    Ok(AnalysisReport {
        run_id: run.manifest.run_id.clone(),
        fragmentation: breakdown_by_fragmentation(&run.predictions, &gold, threshold)?,
        channels: channel_report(&run.predictions, &messages, min_messages, threshold)?,
    })
}

// ---------------------------------------------------------------- prompts

pub fn dump_prompts(out: Option<&Path>) -> Result<String> {
    let mut text = String::new();
    for (name, prompt) in dump_templates() {
        text.push_str(&format!("=== {name}\n--- system\n{}\n--- user\n{}\n\n", prompt.system, prompt.user));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let all: Vec<_> = dump_templates()
            .into_iter()
            .map(|(name, p)| serde_json::json!({"name": name, "system": p.system, "user": p.user, "digest": p.digest()}))
            .collect();
        write_json(&dir.join("templates.json"), &all)?;
        let path = dir.join("templates.txt");
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(text)
}
