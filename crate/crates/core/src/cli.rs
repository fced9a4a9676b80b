//! `baroleak` command line.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::eval::{cross_validate, EvalReport};
use crate::prep::{segment, Pipeline, SegmentationProtocol};
use crate::sim::{synth_corpus, GenerationSpec, SimulatorConfig, SpeakerSource, TapProfile, Task, Tone};
use crate::svm::{self, Kernel, SvmModel, SvmParams};
use crate::trace::{parse_trace_csv, read_dataset, write_dataset, Dataset, Label};

#[derive(Debug, Parser)]
#[command(name = "baroleak", version, about = "Barometer side-channel simulation and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus.
    Simulate(SimulateArgs),
    /// Cut labeled records out of a recorded trace.
    Segment(SegmentArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Repeated stratified cross-validation on a dataset.
    Evaluate(EvaluateArgs),
    /// Classify the records of a dataset or the windows of a trace.
    Predict(PredictArgs),
    /// Export plot-ready CSV from a trace or an evaluation report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub task: Task,
    /// Records per class; defaults depend on the task.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with optional [simulator], [tap] and [speaker] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sensor noise standard deviation (hPa).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Simulate a phone without ingress protection.
    #[arg(long)]
    pub unsealed: bool,
    /// Tone played by the speaker: none, ringtone, sine:<hz> or multi:<hz>@<amp>;...
    #[arg(long)]
    pub tone: Option<Tone>,
    /// Directory for the raw trace CSV files.
    #[arg(long)]
    pub traces_dir: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Event,
    Blocks,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Trace CSV.
    #[arg(long)]
    pub trace: PathBuf,
    /// CSV of `time_s,label` rows, times relative to the first sample.
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, value_enum, default_value = "event")]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 1.0)]
    pub pre: f64,
    #[arg(long, default_value_t = 2.0)]
    pub window: f64,
    #[arg(long, default_value_t = 10.0)]
    pub block: f64,
    #[arg(long, default_value_t = 2.0)]
    pub rest: f64,
    /// Class set, comma separated, in order; defaults to labels in order of
    /// first appearance.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<Label>>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SvmArgs {
    /// linear, rbf (automatic gamma) or rbf:<gamma>.
    #[arg(long)]
    pub kernel: Option<Kernel>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Preprocessing chain, e.g. "std" or "std|savgol(2,5)".
    #[arg(long, default_value = "std")]
    pub pipeline: Pipeline,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with an optional [svm] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub svm: SvmArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub svm: SvmArgs,
    /// Also write the probability matrix as CSV (rows predicted, columns true).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Samples between successive windows on a trace.
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
    pub report: Option<PathBuf>,
    /// Trace CSV files to overlay; each becomes one series.
    #[arg(long, num_args = 1..)]
    pub trace: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    simulator: Option<SimulatorConfig>,
    tap: Option<TapProfile>,
    speaker: Option<SpeakerSource>,
    rest_s: Option<f64>,
    svm: Option<SvmParams>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = read(p)?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn check_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

/// Writes through a temporary file in the target directory so a failed run
/// never leaves a partial file behind.
fn write_atomic(path: &Path, contents: &str, force: bool) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    if force {
        tmp.persist(path)
    } else {
        tmp.persist_noclobber(path)
    }
    .map_err(|e| anyhow!("writing {}: {}", path.display(), e.error))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&read(path)?).with_context(|| format!("reading dataset {}", path.display()))
}

/// Task recorded in the records' metadata, if all agree.
fn dataset_task(dataset: &Dataset) -> Option<Task> {
    let first = dataset.records().first()?.meta.get("task")?;
    if dataset.records().iter().all(|r| r.meta.get("task") == Some(first)) {
        first.parse().ok()
    } else {
        None
    }
}

fn svm_params(args: &SvmArgs, dataset: &Dataset) -> Result<SvmParams> {
    let file = load_config(args.config.as_deref())?;
    let mut p = match (file.svm, dataset_task(dataset)) {
        (Some(p), _) => p,
        (None, Some(task)) => SvmParams::for_task(task),
        (None, None) if dataset.class_set().len() > 2 => SvmParams {
            kernel: Kernel::Rbf { gamma: None },
            ..SvmParams::default()
        },
        (None, None) => SvmParams::default(),
    };
    if let Some(k) = args.kernel {
        p.kernel = k;
    }
    if let Some(c) = args.c {
        p.c = c;
    }
    if let Some(t) = args.tol {
        p.tol = t;
    }
    p.seed = args.seed;
    p.validate()?;
    Ok(p)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    check_output(&a.out.out, a.out.force)?;
    let file = load_config(a.config.as_deref())?;
    let mut config = file.simulator.unwrap_or_default();
    config.seed = a.seed;
    if let Some(n) = a.noise {
        config.noise_std_hpa = n;
    }
    if a.unsealed {
        config.ip_sealed = false;
    }
    let mut spec = GenerationSpec::new(a.task);
    if let Some(t) = file.tap {
        spec.tap = t;
    }
    if let Some(s) = file.speaker {
        spec.speaker = s;
    }
    if let Some(tone) = a.tone {
        spec.speaker.kind = tone;
    }
    if let Some(r) = file.rest_s {
        spec.rest_s = r;
    }
    if let Some(n) = a.per_class {
        spec = spec.per_class(n);
    }
    let corpus = synth_corpus(&config, &spec)?;
    if let Some(dir) = &a.traces_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, trace) in &corpus.traces {
            let path = dir.join(format!("{name}.csv"));
            check_output(&path, a.out.force)?;
            write_atomic(&path, &trace.to_csv(), a.out.force)?;
        }
    }
    write_atomic(&a.out.out, &write_dataset(&corpus.dataset), a.out.force)?;
    let d = &corpus.dataset;
    println!("task {}  seed {}  window {} samples", a.task, a.seed, d.window_len());
    for (label, n) in d.class_set().iter().zip(d.class_counts()) {
        println!("  {label}: {n}");
    }
    println!("{} records -> {}", d.len(), a.out.out.display());
    Ok(())
}

fn parse_events(text: &str) -> Result<Vec<(f64, Label)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, l) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("events line {}: expected time_s,label", i + 1))?;
        let t = t.trim();
        if i == 0 && t.parse::<f64>().is_err() {
            continue; // header row
        }
        let time: f64 = t
            .parse()
            .with_context(|| format!("events line {}: bad time {t:?}", i + 1))?;
        let label: Label = l
            .trim()
            .parse()
            .map_err(|e| anyhow!("events line {}: {e}", i + 1))?;
        out.push((time, label));
    }
    Ok(out)
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    check_output(&a.out.out, a.out.force)?;
    let trace = parse_trace_csv(&read(&a.trace)?)
        .with_context(|| format!("reading trace {}", a.trace.display()))?;
    let events = parse_events(&read(&a.events)?)?;
    let protocol = match a.protocol {
        ProtocolArg::Event => SegmentationProtocol::event_window(a.pre, a.window),
        ProtocolArg::Blocks => SegmentationProtocol::alternating_blocks(a.block, a.rest),
    };
    let seg = segment(&trace, &protocol, &events)?;
    let classes = match a.classes {
        Some(c) => c,
        None => {
            let mut c: Vec<Label> = Vec::new();
            for (_, l) in &events {
                if !c.contains(l) {
                    c.push(*l);
                }
            }
            c
        }
    };
    let records: Vec<_> = seg
        .records
        .into_iter()
        .map(|r| r.with_meta("source", a.trace.display()))
        .collect();
    let n = records.len();
    let dataset = Dataset::new(classes, protocol.record_len(trace.sample_rate_hz()), records)?;
    write_atomic(&a.out.out, &write_dataset(&dataset), a.out.force)?;
    println!(
        "{n} records, {} dropped, {} overlapping -> {}",
        seg.dropped,
        seg.overlapping,
        a.out.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    check_output(&a.out.out, a.out.force)?;
    let dataset = load_dataset(&a.data)?;
    let params = svm_params(&a.svm, &dataset)?;
    let (prepared, _) = a.svm.pipeline.apply_dataset(&dataset)?;
    let mut model = svm::train(&prepared, &params)?;
    model.train_meta.pipeline = Some(a.svm.pipeline.to_string());
    model.train_meta.fingerprint = dataset.fingerprint();
    write_atomic(&a.out.out, &model.to_json(), a.out.force)?;
    let svs: usize = model.machines.iter().map(|m| m.support_vectors.len()).sum();
    println!(
        "{} machine(s), {svs} support vectors, kernel {} -> {}",
        model.machines.len(),
        model.kernel,
        a.out.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    check_output(&a.out.out, a.out.force)?;
    if let Some(csv) = &a.csv {
        check_output(csv, a.out.force)?;
    }
    let dataset = load_dataset(&a.data)?;
    let params = svm_params(&a.svm, &dataset)?;
    let report = cross_validate(&dataset, a.k, a.repeats, &params, &a.svm.pipeline, a.svm.seed)?;
    write_atomic(&a.out.out, &report.to_json(), a.out.force)?;
    if let Some(csv) = &a.csv {
        write_atomic(csv, &report.probability_csv(), a.out.force)?;
    }
    println!(
        "mean accuracy {:.2} over {} x {}-fold ({})",
        report.mean_accuracy,
        a.repeats,
        a.k,
        report.meta.pipeline
    );
    if dataset.class_set().len() > 2 {
        print!("{}", report.format_probabilities());
    }
    Ok(())
}

fn prepare(pipeline: &Pipeline, window: &[f64]) -> Result<Vec<f64>> {
    Ok(pipeline.apply(window)?.0)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    if let Some(out) = &a.out {
        check_output(out, a.force)?;
    }
    let model = SvmModel::from_json(&read(&a.model)?)
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let pipeline: Pipeline = model
        .train_meta
        .pipeline
        .as_deref()
        .unwrap_or("")
        .parse()?;
    let mut text = String::new();
    if let Some(path) = &a.data {
        let dataset = load_dataset(path)?;
        text.push_str("index,truth,predicted,score\n");
        let mut correct = 0;
        for (i, r) in dataset.records().iter().enumerate() {
            let (label, score) = model.predict_with_score(&prepare(&pipeline, &r.window)?)?;
            correct += (label == r.label) as usize;
            text.push_str(&format!("{i},{},{label},{score}\n", r.label));
        }
        eprintln!(
            "accuracy {:.4} ({correct}/{})",
            correct as f64 / dataset.len().max(1) as f64,
            dataset.len()
        );
    } else if let Some(path) = &a.trace {
        let trace = parse_trace_csv(&read(path)?)
            .with_context(|| format!("reading trace {}", path.display()))?;
        if a.step == 0 {
            bail!("--step must be at least 1");
        }
        if trace.len() < model.dim {
            bail!(
                "trace has {} samples, model windows need {}",
                trace.len(),
                model.dim
            );
        }
        text.push_str("start_s,predicted,score\n");
        let mut start = 0;
        while start + model.dim <= trace.len() {
            let w = &trace.samples()[start..start + model.dim];
            let (label, score) = model.predict_with_score(&prepare(&pipeline, w)?)?;
            text.push_str(&format!("{},{label},{score}\n", trace.offset_s(start)));
            start += a.step;
        }
    }
    match &a.out {
        Some(out) => write_atomic(out, &text, a.force)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    check_output(&a.out.out, a.out.force)?;
    let text = if let Some(path) = &a.report {
        let body = read(path)?;
        if body.trim().is_empty() {
            bail!("{} is empty", path.display());
        }
        EvalReport::from_json(&body)?.tidy_probability_csv()
    } else {
        let mut s = String::from("time_s,value,series\n");
        for path in &a.trace {
            let body = read(path)?;
            if body.trim().is_empty() {
                bail!("{} is empty", path.display());
            }
            let trace = parse_trace_csv(&body)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let series = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            for (i, v) in trace.samples().iter().enumerate() {
                s.push_str(&format!("{},{v},{series}\n", trace.offset_s(i)));
            }
        }
        s
    };
    write_atomic(&a.out.out, &text, a.out.force)?;
    println!("{} rows -> {}", text.lines().count() - 1, a.out.out.display());
    Ok(())
}
