//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, schema or
//! I/O error, 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{MessageEdge, RunConfig};
use crate::encoders::Vocabulary;
use crate::error::{FgaError, Result};
use crate::harness::{
    evaluate, generate_synthetic, importance_scores, load_dataset, prune_interactions, train_with, worker_count,
    write_dataset, write_dataset_with_sidecar, Ensemble, SyntheticSpec,
};
use crate::math::GradCheckReport;
use crate::model::{model_grad_check, Checkpoint, Model};

/// Gradient checks fail at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "fga", version, about = "Factor graph attention: data, training, evaluation and analysis")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a generator spec.
    GenData(GenDataArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Rank a dataset with one checkpoint or an ensemble.
    Eval(EvalArgs),
    /// Importance scores, attention dumps and pruning.
    Analyze {
        #[command(subcommand)]
        action: AnalyzeCommand,
    },
    /// Finite-difference check of every model gradient at toy size.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON generator spec; missing fields take their defaults.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store region features in this sidecar file (next to `--out`) instead of inline.
    #[arg(long)]
    pub sidecar: Option<String>,
    /// Also write a run configuration matching the data.
    #[arg(long)]
    pub config_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint manifest; the blob goes next to it with a `.bin` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary JSON. Defaults to the training file with a `.vocab.json` extension.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Per-epoch log. Defaults to the checkpoint with a `.log.json` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Not supported; training always starts from the seed.
    #[arg(long, hide = true)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One checkpoint, or a comma-separated list to average as an ensemble.
    #[arg(long, value_delimiter = ',', required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Also report NDCG; every record needs dense relevance.
    #[arg(long)]
    pub ndcg: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Normalized cue importance per utility.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Average absolute terms instead of signed ones.
        #[arg(long)]
        absolute: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-utility beliefs of one record as JSON.
    Attention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        record: String,
    },
    /// Disable messages whose importance falls below a threshold.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        absolute: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradDims {
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradDims::Tiny)]
    pub dims: GradDims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiply analytic gradients by this factor (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<f64>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Reports go to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.json),
        Command::Train(a) => train_cmd(a, cli.json),
        Command::Eval(a) => eval_cmd(a, cli.json),
        Command::Analyze { action } => analyze(action, cli.json),
        Command::Gradcheck(a) => gradcheck(a, cli.json),
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    let mut out = std::io::stdout().lock();
    let line = if json {
        serde_json::to_string_pretty(value).expect("report serializes")
    } else {
        text()
    };
    let _ = writeln!(out, "{line}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    std::fs::write(path, text).map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
}

/// `data.jsonl` -> `data.vocab.json`.
pub fn default_vocab_path(data: &Path) -> PathBuf {
    data.with_extension("vocab.json")
}

fn gen_data(a: &GenDataArgs, json: bool) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| FgaError::io(format!("reading spec {}", a.spec.display()), e))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| FgaError::Config(format!("invalid generator spec {}: {e}", a.spec.display())))?;
    let data = generate_synthetic(&spec, a.seed)?;

    // Write under a temporary name so a failure leaves no partial output.
    let tmp = a.out.with_extension("partial");
    let written = match &a.sidecar {
        Some(name) => write_dataset_with_sidecar(&tmp, name, &data.records, &data.vocab),
        None => write_dataset(&tmp, &data.records, &data.vocab),
    };
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, &a.out).map_err(|e| FgaError::io(format!("moving output to {}", a.out.display()), e))?;
    let vocab_path = default_vocab_path(&a.out);
    data.vocab.save(&vocab_path)?;
    if let Some(path) = &a.config_out {
        write_json(path, &spec.run_config())?;
    }

    #[derive(Serialize)]
    struct Report<'a> {
        records: usize,
        out: &'a Path,
        vocab: &'a Path,
    }
    let report = Report {
        records: data.records.len(),
        out: &a.out,
        vocab: &vocab_path,
    };
    emit(json, &report, || format!("wrote {} records to {}", report.records, a.out.display()));
    Ok(())
}

fn train_cmd(a: &TrainArgs, json: bool) -> Result<()> {
    if a.resume.is_some() {
        return Err(FgaError::InvalidArgument(
            "--resume is not supported: training always starts from the configured seed".into(),
        ));
    }
    let mut config = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.optimizer.lr = lr;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.validate()?;
    let vocab = Vocabulary::load(&a.vocab.clone().unwrap_or_else(|| default_vocab_path(&a.train)))?;
    let train = load_dataset(&a.train, &vocab, &config.dims)?;
    let val = match &a.val {
        Some(p) => load_dataset(p, &vocab, &config.dims)?,
        None => Vec::new(),
    };
    let (checkpoint, log) = train_with(&config, &vocab, &train, &val, &mut |e| {
        let val = e.val_mrr.map_or(String::new(), |m| format!(" val_mrr {m:.4}"));
        eprintln!("epoch {} loss {:.4}{val}", e.epoch, e.train_loss);
    })?;
    checkpoint.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.json"));
    write_json(&log_path, &log)?;
    emit(json, &log, || {
        format!(
            "saved epoch {} (val MRR {}) to {}",
            log.best_epoch,
            log.best_val_mrr.map_or("n/a".into(), |m| format!("{m:.4}")),
            a.out.display()
        )
    });
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.to_model()
}

fn eval_cmd(a: &EvalArgs, json: bool) -> Result<()> {
    let models = a.model.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let first = &models[0];
    let records = load_dataset(&a.data, &first.vocab, &first.config.dims)?;
    let report = if models.len() == 1 {
        evaluate(first, &records, a.ndcg, worker_count())?
    } else {
        evaluate(&Ensemble::new(models)?, &records, a.ndcg, worker_count())?
    };
    if let Some(path) = &a.csv {
        report.write_csv(path)?;
    }
    emit(json, &report, || {
        report
            .summary()
            .iter()
            .map(|(k, v)| format!("{k:<10} {v:.4}"))
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}

fn analyze(action: &AnalyzeCommand, json: bool) -> Result<()> {
    match action {
        AnalyzeCommand::Importance {
            model,
            data,
            absolute,
            csv,
        } => {
            let model = load_model(model)?;
            let records = load_dataset(data, &model.vocab, &model.config.dims)?;
            let table = importance_scores(&model, &records, *absolute)?;
            if let Some(path) = csv {
                table.write_csv(path)?;
            }
            emit(json, &table, || {
                let mut lines = Vec::new();
                for row in &table.rows {
                    for c in &row.cues {
                        lines.push(format!("{:<20} {:<20} {:.4}", row.utility, c.cue, c.score));
                    }
                }
                lines.join("\n")
            });
            Ok(())
        }
        AnalyzeCommand::Attention { model, data, record } => {
            let model = load_model(model)?;
            let records = load_dataset(data, &model.vocab, &model.config.dims)?;
            let chosen = records
                .iter()
                .find(|r| &r.record_id == record)
                .ok_or_else(|| FgaError::InvalidArgument(format!("no record `{record}` in {}", data.display())))?;
            let out = model.predict(std::slice::from_ref(chosen))?.remove(0);

            #[derive(Serialize)]
            struct Belief<'a> {
                utility: &'a str,
                belief: &'a [f64],
            }
            #[derive(Serialize)]
            struct Dump<'a> {
                record_id: &'a str,
                probs: &'a [f64],
                beliefs: Vec<Belief<'a>>,
            }
            let dump = Dump {
                record_id: &out.record_id,
                probs: &out.probs,
                beliefs: out
                    .attention
                    .utilities
                    .iter()
                    .zip(&out.attention.beliefs)
                    .map(|(u, b)| Belief { utility: u, belief: b })
                    .collect(),
            };
            // Heatmap data is always JSON.
            emit(true, &dump, String::new);
            Ok(())
        }
        AnalyzeCommand::Prune {
            model,
            data,
            threshold,
            out,
            absolute,
        } => {
            let model = load_model(model)?;
            let records = load_dataset(data, &model.vocab, &model.config.dims)?;
            let table = importance_scores(&model, &records, *absolute)?;
            let pruned = prune_interactions(&model, &table, *threshold)?;
            Checkpoint::from_model(&pruned).save(out)?;
            let edges: Vec<&MessageEdge> = pruned.pruned.iter().collect();
            emit(json, &edges, || format!("{} messages pruned; wrote {}", edges.len(), out.display()));
            Ok(())
        }
    }
}

fn gradcheck(a: &GradcheckArgs, json: bool) -> Result<()> {
    let GradDims::Tiny = a.dims;
    let start = std::time::Instant::now();
    let report: GradCheckReport = model_grad_check(a.seed, a.corrupt)?;

    #[derive(Serialize)]
    struct Report<'a> {
        max_rel_error: f64,
        worst: Option<&'a (String, usize)>,
        analytic: f64,
        numeric: f64,
        coordinates: usize,
        seconds: f64,
        passed: bool,
    }
    let passed = report.max_rel_error < GRADCHECK_TOLERANCE;
    let r = Report {
        max_rel_error: report.max_rel_error,
        worst: report.worst.as_ref(),
        analytic: report.worst_values.0,
        numeric: report.worst_values.1,
        coordinates: report.coordinates,
        seconds: start.elapsed().as_secs_f64(),
        passed,
    };
    emit(json, &r, || {
        format!(
            "max relative error {:.3e} over {} coordinates ({})",
            r.max_rel_error,
            r.coordinates,
            if passed { "pass" } else { "FAIL" }
        )
    });
    if passed {
        Ok(())
    } else {
        Err(gradient_mismatch(&report))
    }
}

fn gradient_mismatch(report: &GradCheckReport) -> FgaError {
    let at = report
        .worst
        .as_ref()
        .map_or(String::new(), |(name, k)| format!(" at {name}[{k}]"));
    FgaError::GradientMismatch(format!(
        "max relative error {:.3e}{at} is not below {GRADCHECK_TOLERANCE:e}",
        report.max_rel_error
    ))
}
