use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use token_thinner::cost::{self, SweepRow};
use token_thinner::model::{evaluate, load};
use token_thinner::ModelConfig;
use token_thinner_cli::dataset::{self, Format, Split};
use token_thinner_cli::error::{CliError, Result};
use token_thinner_cli::run::{encode, run, CHECKPOINT_FILE, REPORT_FILE, VOCAB_FILE};
use token_thinner_cli::sweep::{sweep, worker_count, write_summary, Axis, SUMMARY_FILE};
use token_thinner_cli::synth::{synth_task, SynthSpec, TaskKind};
use token_thinner_cli::{RunConfig, Vocabulary};

#[derive(Parser)]
#[command(name = "token-thinner", version, about = "Train, evaluate and cost token-thinned transformer classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a labeled file and write train/val/test splits.
    Ingest(IngestArgs),
    /// Generate a synthetic classification dataset.
    Synth(SynthArgs),
    /// Train one configuration and write its report and checkpoint.
    Train(TrainArgs),
    /// Evaluate a trained run directory on a labeled file.
    Eval(EvalArgs),
    /// Print analytical compute and memory costs.
    Cost(CostArgs),
    /// Train once per value of one hyperparameter axis.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct IngestArgs {
    input: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    /// JSON object mapping label names to class ids.
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: TaskKind,
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long, default_value_t = 48)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Labeled data file.
    data: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    label_map: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Run config whose model section is costed; BERT-base geometry otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated placements; 0 means no combining module.
    #[arg(long, value_delimiter = ',')]
    placement: Vec<usize>,
    /// Comma-separated preservation ratios.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// `csv` for a table, `jsonl` for full reports.
    #[arg(long, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

fn infer_format(explicit: Option<Format>, path: &Path) -> Result<Format> {
    explicit
        .or_else(|| Format::from_path(path))
        .ok_or_else(|| CliError::Config(format!("pass --format; cannot infer it from {}", path.display())))
}

fn ingest_cmd(a: IngestArgs) -> Result<()> {
    let format = infer_format(a.format, &a.input)?;
    let ds = dataset::ingest(&a.input, format, a.label_map.as_deref())?;
    let test = ds.tagged(Split::Test);
    let mut rest = ds.clone();
    rest.examples.retain(|e| e.split != Some(Split::Test));
    let (train, val) = if ds.examples.iter().any(|e| e.split == Some(Split::Val)) {
        (rest.tagged(Split::Train), rest.tagged(Split::Val))
    } else {
        rest.split_train_val(a.val_fraction, a.seed)?
    };
    println!(
        "{} rows, {} classes ({}); train {}, val {}, test {}",
        ds.len(),
        ds.class_count(),
        ds.label_names.join(", "),
        train.len(),
        val.len(),
        test.len()
    );
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        let ext = match format {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        };
        for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
            if !split.is_empty() {
                dataset::write(split, &out.join(format!("{name}.{ext}")), format)?;
            }
        }
        fs::write(out.join("labels.json"), serde_json::to_string_pretty(&ds.label_names)?)?;
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        positive_fraction: a.positive_fraction,
        ..SynthSpec::new(a.kind, a.size, a.seq_len, a.seed)
    };
    let ds = synth_task(&spec)?;
    match a.out {
        Some(path) => {
            dataset::write(&ds, &path, a.format)?;
            println!("wrote {} examples to {}", ds.len(), path.display());
        }
        None => dataset::write_to(&ds, io::stdout().lock(), a.format)?,
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = load_config(&a.config, a.seed)?;
    let outcome = run(&config, Some(&a.out))?;
    let r = &outcome.report;
    for e in &r.epochs {
        println!(
            "epoch {}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
            e.epoch, e.train_loss, e.val.loss, e.val.metrics.accuracy
        );
    }
    let m = r.test.metrics;
    println!(
        "best epoch {}; test acc {:.4}, macro F1 {:.4}, micro F1 {:.4}; FLOPs ratio {:.4}",
        r.best_epoch, m.accuracy, m.macro_f1, m.micro_f1, r.cost.ratio_vs_dense
    );
    println!("report: {}", a.out.join(REPORT_FILE).display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load(a.run.join(CHECKPOINT_FILE))?;
    let vocab = Vocabulary::load(&a.run.join(VOCAB_FILE))?;
    let format = infer_format(a.format, &a.data)?;
    let ds = dataset::ingest(&a.data, format, a.label_map.as_deref())?;
    ds.require_non_empty("evaluation")?;
    let encoded = encode(&ds, &vocab, model.config().max_seq_len);
    let eval = evaluate(&model, &encoded)?;
    println!("{}", serde_json::to_string_pretty(&eval)?);
    Ok(())
}

fn cost_cmd(a: CostArgs) -> Result<()> {
    let base = match &a.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::bert_base(),
    };
    let placements: Vec<Option<usize>> = if a.placement.is_empty() {
        vec![base.placement]
    } else {
        a.placement.iter().map(|&l| (l != 0).then_some(l)).collect()
    };
    let ratios = if a.p.is_empty() { vec![base.preservation_ratio] } else { a.p.clone() };
    let rows = cost::sweep(&base, &placements, &ratios)?;
    let stdout = io::stdout();
    match a.format {
        Format::Jsonl => {
            let mut out = stdout.lock();
            for row in &rows {
                writeln!(out, "{}", serde_json::to_string(row)?)?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record([
                "placement",
                "preservation_ratio",
                "combo_tokens",
                "flops",
                "dense_flops",
                "ratio_vs_dense",
                "dense_over_this",
                "peak_activation_bytes_batch16",
                "memory_ratio",
            ])?;
            for SweepRow {
                placement,
                preservation_ratio,
                combo_tokens,
                report,
            } in &rows
            {
                w.write_record([
                    placement.unwrap_or(0).to_string(),
                    preservation_ratio.to_string(),
                    combo_tokens.to_string(),
                    report.total_flops.to_string(),
                    report.dense_flops.to_string(),
                    format!("{:.4}", report.ratio_vs_dense),
                    format!("{:.4}", report.dense_over_this),
                    report.peak_memory_at_batch(cost::REPORT_BATCH).to_string(),
                    format!("{:.4}", report.memory_ratio),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let config = load_config(&a.config, a.seed)?;
    let entries = sweep(&config, a.axis, &a.values, Some(&a.out), worker_count());
    let summary = a.out.join(SUMMARY_FILE);
    write_summary(&summary, a.axis, &entries)?;
    let failed = entries.iter().filter(|e| e.outcome.is_err()).count();
    for e in &entries {
        match &e.outcome {
            Ok(r) => println!(
                "{} = {}: test acc {:.4}, FLOPs ratio {:.4}",
                a.axis.name(),
                e.value,
                r.test.metrics.accuracy,
                r.cost.ratio_vs_dense
            ),
            Err(err) => eprintln!("{} = {}: {err}", a.axis.name(), e.value),
        }
    }
    println!("summary: {}", summary.display());
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} of {} runs failed", entries.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Cost(a) => cost_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
