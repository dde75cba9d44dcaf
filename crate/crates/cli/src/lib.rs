//! Command-line front end: argument parsing, exit codes and JSON reports.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mugs::config::TrainConfig;
use mugs::data::synth::{synth_hierarchical_dataset, SynthSpec};
use mugs::data::Dataset;
use mugs::eval::{extract_from_checkpoint, knn_classify, linear_probe, ProbeConfig, KNN_KS, KNN_TAU};
use mugs::train::pretrain_run;

#[derive(Parser, Debug)]
#[command(name = "mugs", version, about = "Multi-granular self-supervised pretraining on small image sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a student/teacher pair from a JSON config.
    Pretrain(PretrainArgs),
    /// Weighted kNN accuracy of checkpoint features.
    EvalKnn(EvalArgs),
    /// Linear-probe accuracy of checkpoint features.
    EvalLinear(LinearArgs),
    /// Write backbone features of a dataset to a feature file.
    ExportFeatures(ExportArgs),
    /// Generate the synthetic hierarchical dataset.
    GenSynth(SynthArgs),
    /// Run the gradient, equation and mechanics audit suites.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the loss weights as `instance,local_group,group`.
    #[arg(long, value_parser = parse_lambdas)]
    lambdas: Option<[f32; 3]>,
    /// Override the dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeatureSource {
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use student instead of teacher weights.
    #[arg(long)]
    student: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    source: FeatureSource,
    /// Labelled reference dataset directory.
    #[arg(long)]
    train: PathBuf,
    /// Labelled query dataset directory.
    #[arg(long)]
    test: PathBuf,
    /// Neighbour counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = KNN_KS)]
    k: Vec<usize>,
    /// Vote temperature.
    #[arg(long, default_value_t = KNN_TAU)]
    tau: f32,
}

#[derive(Args, Debug)]
struct LinearArgs {
    #[command(flatten)]
    source: FeatureSource,
    /// Labelled train dataset directory.
    #[arg(long)]
    train: PathBuf,
    /// Labelled test dataset directory.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    lr: f32,
    #[arg(long, default_value_t = ProbeConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    source: FeatureSource,
    /// Dataset directory to embed.
    #[arg(long)]
    data: PathBuf,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Images per fine class (8 fine classes).
    #[arg(long, default_value_t = 32)]
    n_per_fine: usize,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_lambdas(s: &str) -> Result<[f32; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated weights, got `{s}`"));
    };
    let p = |x: &str| x.trim().parse::<f32>().map_err(|e| format!("`{x}`: {e}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<mugs::Error> for Failure {
    fn from(e: mugs::Error) -> Self {
        match e {
            mugs::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(dir)?)
}

fn pretrain(a: PretrainArgs) -> Result<(), Failure> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some([i, l, g]) = a.lambdas {
        cfg.lambda_instance = i;
        cfg.lambda_local_group = l;
        cfg.lambda_group = g;
    }
    if let Some(d) = a.data {
        cfg.data = d.display().to_string();
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = d.display().to_string();
    }
    cfg.validate()?;
    let out = pretrain_run(&cfg, a.resume.as_deref(), |epoch, rows| {
        if let Some(m) = rows.last() {
            eprintln!(
                "epoch {:>4}  loss {:.4}  instance {:.4}  local_group {:.4}  group {:.4}  lr {:.2e}",
                epoch + 1,
                m.loss_total,
                m.loss_instance,
                m.loss_local_group,
                m.loss_group,
                m.lr
            );
        }
    })?;
    let last = out.metrics.last();
    print_json(&json!({
        "checkpoint": out.checkpoint,
        "metrics": out.metrics_path,
        "steps": out.trainer.step,
        "final_loss": last.map(|m| m.loss_total),
    }));
    Ok(())
}

fn eval_knn(a: EvalArgs) -> Result<(), Failure> {
    let train = extract_from_checkpoint(&a.source.checkpoint, &load_dataset(&a.train)?, a.source.student)?;
    let test = extract_from_checkpoint(&a.source.checkpoint, &load_dataset(&a.test)?, a.source.student)?;
    let r = knn_classify(&train, &test, &a.k, a.tau)?;
    let per_k: Vec<_> = r.per_k.iter().map(|(k, acc)| json!({"k": k, "accuracy": acc})).collect();
    print_json(&json!({"per_k": per_k, "best_k": r.best_k, "best": r.best}));
    Ok(())
}

fn eval_linear(a: LinearArgs) -> Result<(), Failure> {
    let train = extract_from_checkpoint(&a.source.checkpoint, &load_dataset(&a.train)?, a.source.student)?;
    let test = extract_from_checkpoint(&a.source.checkpoint, &load_dataset(&a.test)?, a.source.student)?;
    let cfg = ProbeConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed, ..ProbeConfig::default() };
    let r = linear_probe(&train, &test, &cfg)?;
    print_json(&json!({"train_accuracy": r.train_accuracy, "test_accuracy": r.test_accuracy}));
    Ok(())
}

fn export_features(a: ExportArgs) -> Result<(), Failure> {
    let bank = extract_from_checkpoint(&a.source.checkpoint, &load_dataset(&a.data)?, a.source.student)?;
    bank.save(&a.out)?;
    print_json(&json!({"out": a.out, "rows": bank.len(), "dim": bank.dim()}));
    Ok(())
}

fn gen_synth(a: SynthArgs) -> Result<(), Failure> {
    if a.n_per_fine == 0 {
        return Err(Failure::Usage("--n-per-fine must be >= 1".into()));
    }
    let ds = synth_hierarchical_dataset(SynthSpec::new(a.seed, a.n_per_fine));
    ds.save(&a.out)?;
    print_json(&json!({"out": a.out, "images": ds.len()}));
    Ok(())
}

fn audit(a: AuditArgs) -> Result<(), Failure> {
    let report = mugs::audit::run_all(a.seed)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &a.out {
        std::fs::write(path, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    println!("{text}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime("audit failed".into()))
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::EvalKnn(a) => eval_knn(a),
        Command::EvalLinear(a) => eval_linear(a),
        Command::ExportFeatures(a) => export_features(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Audit(a) => audit(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
