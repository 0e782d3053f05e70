//! `recurt` command line: dataset generation from split specs, training and
//! evaluation from run-config documents, and the halting runtime benchmark.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use recurt_core::error::HarnessError;
use recurt_core::exec::ExecMode;
use recurt_core::harness::{
    bench_halt, evaluate_model, load_split, preset, preset_names, train, BenchConfig, CsvLog,
    MetricsRecord, RunConfig,
};
use recurt_core::models::Model;
use recurt_core::tasks::{generate_split, write_records, DatasetSpec};

#[derive(Parser)]
#[command(name = "recurt", about = "Recurrent-transformer testbed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset files from a split-spec TOML document.
    GenerateData(GenerateArgs),
    /// Train a model from a run config or preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset file.
    Evaluate(EvaluateArgs),
    /// Time the gut / gut_upperbound / gut_nohalt variants per epoch.
    BenchHalt(BenchArgs),
    /// List built-in run presets.
    Presets,
}

#[derive(Args)]
struct GenerateArgs {
    /// Split-spec TOML file ([splits.<name>] tables).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for <name>.jsonl files.
    #[arg(long)]
    out: PathBuf,
    /// Override the seed of every split.
    #[arg(long)]
    seed: Option<u64>,
    /// Generate serially (output is identical either way).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config TOML document.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (see `recurt presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Directory holding <split>.jsonl files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint.rckp, metrics.csv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Serial bit-exact mode with suppressed wall-clock columns.
    #[arg(long)]
    deterministic: bool,
    /// Float width: 32 or 64.
    #[arg(long)]
    precision: Option<u8>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file (<split>.jsonl) to score.
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV to append to.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    precision: Option<u8>,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench-config TOML ([run] table plus upperbounds/epochs).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Base run preset to benchmark.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated upperbound layer counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 20, 30, 40])]
    upperbounds: Vec<usize>,
    /// Timed training epochs per setting.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Cap on samples per epoch.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/version output
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::BenchHalt(a) => run_bench(a),
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn generate_data(a: GenerateArgs) -> Result<(), HarnessError> {
    let text = std::fs::read_to_string(&a.spec)?;
    let mut spec = DatasetSpec::from_toml(&text)?;
    if let Some(seed) = a.seed {
        for s in spec.splits.values_mut() {
            s.seed = seed;
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let mode = if a.deterministic { ExecMode::Sequential } else { ExecMode::Parallel };
    for (name, split) in &spec.splits {
        let records = generate_split(split, mode)?;
        let path = a.out.join(format!("{name}.jsonl"));
        write_records(&path, &records)?;
        println!(
            "{}: {} samples ({} task) -> {}",
            name,
            records.len(),
            split.task.name(),
            path.display()
        );
    }
    Ok(())
}

fn load_run_config(
    config: &Option<PathBuf>,
    preset_name: &Option<String>,
) -> Result<RunConfig, HarnessError> {
    match (config, preset_name) {
        (Some(path), _) => RunConfig::from_toml(&std::fs::read_to_string(path)?),
        (None, Some(name)) => preset(name).ok_or_else(|| {
            HarnessError::Config(format!(
                "unknown preset `{name}`; available: {}",
                preset_names().join(", ")
            ))
        }),
        (None, None) => Err(HarnessError::Config("pass --config or --preset".into())),
    }
}

fn run_train(a: TrainArgs) -> Result<(), HarnessError> {
    let mut run = load_run_config(&a.config, &a.preset)?;
    if let Some(seed) = a.seed {
        run.seed = seed;
    }
    if a.deterministic {
        run.deterministic = true;
    }
    if let Some(p) = a.precision {
        run.precision = p;
    }
    run.validate()?;
    let report = train(&run, &a.data, &a.out)?;
    println!(
        "trained {} steps; best {} accuracy {:.4} at step {}",
        report.steps,
        run.select_split_name(),
        report.best_accuracy,
        report.best_step
    );
    println!("checkpoint: {}", report.checkpoint.display());
    println!("metrics: {}", report.csv.display());
    for (name, summary) in &report.final_evals {
        println!(
            "final {name}: accuracy {:.4} main_loss {:.4} act {:.4} mean_halt {:.2}",
            summary.accuracy, summary.main_loss, summary.act_loss, summary.mean_halt_layer
        );
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), HarnessError> {
    match a.precision.unwrap_or(32) {
        64 => evaluate_typed::<f64>(&a),
        32 => evaluate_typed::<f32>(&a),
        p => Err(HarnessError::Config(format!("precision must be 32 or 64, got {p}"))),
    }
}

fn evaluate_typed<T: recurt_core::tensor::Scalar>(a: &EvaluateArgs) -> Result<(), HarnessError> {
    let model = Model::<T>::load(&a.checkpoint)?;
    let task = recurt_core::tasks::TaskKind::parse(&model.task_tag).ok_or_else(|| {
        HarnessError::Checkpoint(format!("unknown task `{}` in checkpoint", model.task_tag))
    })?;
    let dir = a.data.parent().unwrap_or(Path::new("."));
    let stem = a
        .data
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| HarnessError::Config("data path has no file stem".into()))?;
    let split = load_split(dir, stem, task)?;
    let mode = if a.deterministic { ExecMode::Sequential } else { ExecMode::Parallel };
    let (summary, _) = evaluate_model(&model, &split.prepared, 0.0, mode);

    // rows are buffered so a failure leaves no partial CSV behind
    let mut rows = vec![MetricsRecord {
        step: 0,
        split: split.name.clone(),
        accuracy: summary.accuracy,
        main_loss: summary.main_loss,
        act_loss: summary.act_loss,
        mean_halt_layer: summary.mean_halt_layer,
        epoch_seconds: 0.0,
    }];
    if let Some(lra) = summary.last_read_accuracy {
        rows.push(MetricsRecord {
            step: 0,
            split: format!("{}.lastread", split.name),
            accuracy: lra,
            main_loss: summary.main_loss,
            act_loss: summary.act_loss,
            mean_halt_layer: summary.mean_halt_layer,
            epoch_seconds: 0.0,
        });
    }
    let mut csv = CsvLog::append_to(&a.out)?;
    for row in &rows {
        csv.write(row)?;
        println!("{}", row.to_csv_line());
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), HarnessError> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            // a full bench document, or a plain run config plus flags
            let text = std::fs::read_to_string(path)?;
            match toml::from_str::<BenchConfig>(&text) {
                Ok(full) => full,
                Err(_) => BenchConfig {
                    run: RunConfig::from_toml(&text)?,
                    upperbounds: a.upperbounds.clone(),
                    epochs: a.epochs,
                    samples_per_epoch: a.samples,
                },
            }
        }
        _ => BenchConfig {
            run: load_run_config(&a.config, &a.preset)?,
            upperbounds: a.upperbounds.clone(),
            epochs: a.epochs,
            samples_per_epoch: a.samples,
        },
    };
    if let Some(seed) = a.seed {
        cfg.run.seed = seed;
    }
    if a.deterministic {
        cfg.run.deterministic = true;
    }
    if a.samples.is_some() {
        cfg.samples_per_epoch = a.samples;
    }
    let train_data = load_split(&a.data, &cfg.run.train_split, cfg.run.task)?;
    let table = bench_halt::<f32>(&cfg, &train_data)?;
    table.write_csv(&a.out)?;
    for &upper in &cfg.upperbounds {
        println!(
            "L={upper}: gut {:.2}s  gut_upperbound {:.2}s  gut_nohalt {:.2}s",
            table.mean_seconds("gut", upper),
            table.mean_seconds("gut_upperbound", upper),
            table.mean_seconds("gut_nohalt", upper),
        );
    }
    println!("table: {}", a.out.display());
    Ok(())
}
