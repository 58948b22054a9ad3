use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use inkpairs::data_io::{
    generate_corpus, read_document_dir, read_document_file, write_document_dir, CorpusSpec,
};
use inkpairs::ink::Document;
use inkpairs::model::{Model, ModelConfig, Prediction};
use inkpairs::ref_select::Strategy;
use inkpairs::runner::{
    evaluate, model_from_checkpoint, predict, read_checkpoint, train_with, write_checkpoint,
    RunError, TrainConfig,
};
use inkpairs::svg::export_svg;

/// Exit status 1: bad invocation or configuration.
const EXIT_USAGE: u8 = 1;
/// Exit status 2: unreadable or inconsistent documents, checkpoints or files.
const EXIT_DATA: u8 = 2;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "inkpairs",
    version,
    about = "Stroke classification for online handwritten documents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus as train/, val/ and test/ directories.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a labeled directory.
    Eval(EvalArgs),
    /// Predict stroke classes for one document.
    Predict(PredictArgs),
    /// Render a document as SVG, colored by class.
    ExportSvg(ExportSvgArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output root; documents land in <out>/{train,val,test}/NNNN.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    min_strokes: Option<usize>,
    #[arg(long)]
    max_strokes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Widths and level sizes from the reference configuration.
    Default,
    /// Narrow model for single-CPU training.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of labeled training documents.
    #[arg(long)]
    train: PathBuf,
    /// Directory of labeled validation documents.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON-lines log; stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigArgs,
}

/// Training configuration: a base from `--config` or `--preset`, then
/// individual field overrides.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    accumulate: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// `dynamic`, `total` or `fixed:N`.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    k_cap: Option<usize>,
    #[arg(long)]
    weight_gain: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    same_weight: Option<f64>,
    #[arg(long)]
    change_weight: Option<f64>,
    #[arg(long)]
    isa_off: bool,
    #[arg(long)]
    ceq_ball_only: bool,
    #[arg(long)]
    rpts_concat: bool,
    #[arg(long)]
    aux_off: bool,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "dynamic" => Ok(Strategy::Dynamic),
        "total" => Ok(Strategy::Total),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|n| n.parse().ok())
            .map(Strategy::Fixed)
            .ok_or_else(|| format!("expected `dynamic`, `total` or `fixed:N`, got `{s}`")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => {
                let bytes = fs::read(path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            (None, Some(Preset::Desk)) => TrainConfig::desk(),
            (None, _) => TrainConfig::default(),
        };
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.lr0, self.lr0);
        set(&mut cfg.lr_min, self.lr_min);
        set(&mut cfg.rng_seed, self.rng_seed);
        set(&mut cfg.accumulate, self.accumulate);
        let m = &mut cfg.model;
        set(&mut m.num_classes, self.num_classes);
        set(&mut m.selection.tau, self.tau);
        set(&mut m.selection.strategy, self.strategy);
        set(&mut m.channels, self.channels);
        set(&mut m.weight_gain, self.weight_gain);
        if let Some(k) = self.k_cap {
            m.hierarchy.levels.iter_mut().for_each(|l| l.k_cap = k);
        }
        m.ablations.isa_off |= self.isa_off;
        m.ablations.ceq_ball_only |= self.ceq_ball_only;
        m.ablations.rpts_concat |= self.rpts_concat;
        m.ablations.aux_off |= self.aux_off;
        set(&mut cfg.loss.aux_weight, self.aux_weight);
        set(&mut cfg.loss.same_weight, self.same_weight);
        set(&mut cfg.loss.change_weight, self.change_weight);
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of labeled documents.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    document: PathBuf,
    /// Prediction output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportSvgArgs {
    #[arg(long)]
    document: PathBuf,
    /// Color by this checkpoint's predictions instead of the document's labels.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| data(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(bytes).map_err(data),
    }
}

fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model, CliError> {
    Ok(model_from_checkpoint(&read_checkpoint(path)?, expected)?)
}

fn read_doc(path: &Path) -> Result<Document, CliError> {
    read_document_file(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_dir(path: &Path) -> Result<Vec<Document>, CliError> {
    read_document_dir(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let mut spec = CorpusSpec {
        num_documents: args.train + args.val + args.test,
        ..CorpusSpec::default()
    };
    set(&mut spec.rng_seed, args.rng_seed);
    set(&mut spec.jitter, args.jitter);
    set(&mut spec.strokes_per_doc.0, args.min_strokes);
    set(&mut spec.strokes_per_doc.1, args.max_strokes);
    let docs = generate_corpus(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let (train, rest) = docs.split_at(args.train);
    let (val, test) = rest.split_at(args.val);
    for (name, split) in [("train", train), ("val", val), ("test", test)] {
        write_document_dir(&args.out.join(name), split).map_err(data)?;
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.overrides.resolve()?;
    let train_docs = read_dir(&args.train)?;
    let val_docs = args.val.as_deref().map(read_dir).transpose()?;
    let mut sink: Box<dyn Write> = match &args.log {
        Some(p) => {
            Box::new(fs::File::create(p).map_err(|e| data(format!("{}: {e}", p.display())))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut log_error = None;
    let out = train_with(&train_docs, val_docs.as_deref(), &cfg, |entry| {
        if let Err(e) = writeln!(sink, "{}", entry.to_json_line()).and_then(|_| sink.flush()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(data(format!("log: {e}")));
    }
    write_checkpoint(&args.out, &out.checkpoint)?;
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let expected = match &args.config {
        Some(path) => {
            let cfg = ConfigArgs {
                config: Some(path.clone()),
                ..ConfigArgs::default()
            }
            .resolve()?;
            Some(cfg.model)
        }
        None => None,
    };
    let model = load_model(&args.checkpoint, expected.as_ref())?;
    let docs = read_dir(&args.data)?;
    let report = evaluate(&docs, &model)?;
    let mut bytes = report.to_json();
    bytes.push(b'\n');
    write_output(args.out.as_deref(), &bytes)
}

#[derive(Serialize)]
struct PredictionReport<'a> {
    id: &'a str,
    #[serde(flatten)]
    prediction: &'a Prediction,
}

fn predict_cmd(args: &PredictArgs) -> Result<(), CliError> {
    let model = load_model(&args.checkpoint, None)?;
    let doc = read_doc(&args.document)?;
    let prediction = predict(&doc, &model)?;
    let report = PredictionReport {
        id: &doc.id,
        prediction: &prediction,
    };
    let mut bytes = serde_json::to_vec(&report).map_err(data)?;
    bytes.push(b'\n');
    write_output(args.out.as_deref(), &bytes)
}

fn export_svg_cmd(args: &ExportSvgArgs) -> Result<(), CliError> {
    let doc = read_doc(&args.document)?;
    let labels = match &args.checkpoint {
        Some(ckpt) => predict(&doc, &load_model(ckpt, None)?)?.labels,
        None => doc.labels().ok_or_else(|| {
            data(format!(
                "{}: unlabeled document needs --checkpoint",
                args.document.display()
            ))
        })?,
    };
    let svg = export_svg(&doc, &labels).map_err(data)?;
    write_output(Some(&args.out), &svg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::ExportSvg(a) => export_svg_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
