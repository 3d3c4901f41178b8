use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cac_core::checkpoint::write_atomic;
use cac_core::data::Normalization;
use cac_core::nn::{Phase, CHECKPOINT_FILE, METRICS_FILE};
use cac_core::verify;
use cac_core::{
    evaluate, load_checkpoint, load_cifar10, synth_dataset, train, CacError, Dataset, Model, Result, RunConfig,
    SynthKind,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cac", version, about = "Content-aware convolution: train, evaluate and analyse CAC networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(clap::Args)]
struct DataArgs {
    /// CIFAR-10 binary directory, or `synthetic[:kind[:n[:seed]]]`
    /// with kind `smooth_vs_textured` or `two_gaussians`.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// CIFAR-10 split to read.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write the per-layer cost CSV and a totals JSON for measured ratios.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Totals JSON path; defaults to the CSV path with a `.json` extension.
        #[arg(long)]
        totals: Option<PathBuf>,
    },
    /// Write one score-map CSV per CAC layer for a single image.
    ExportRatios {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the oracle suite; prints a JSON manifest and exits 1 on any failure.
    Verify,
}

fn load_data(args: &DataArgs, model: &Model<f32>) -> Result<Dataset> {
    let set = if let Some(rest) = args.data.strip_prefix("synthetic") {
        let parts: Vec<&str> = rest.split(':').skip(1).collect();
        let kind: SynthKind = match parts.first().filter(|k| !k.is_empty()) {
            Some(k) => serde_json::from_value(serde_json::Value::String(k.to_string()))
                .map_err(|_| CacError::invalid(format!("unknown synthetic kind {k:?}")))?,
            None => SynthKind::SmoothVsTextured,
        };
        let num = |i: usize, default: u64| -> Result<u64> {
            parts.get(i).map_or(Ok(default), |s| {
                s.parse().map_err(|_| CacError::invalid(format!("bad number {s:?} in --data")))
            })
        };
        let [c, n, _] = model.spec().input;
        synth_dataset(kind, num(1, 400)? as usize, num(2, 0)?, c, n)?
    } else {
        let (tr, te) = load_cifar10(Path::new(&args.data), &Normalization::default())?;
        match args.split {
            Split::Train => tr,
            Split::Test => te,
        }
    };
    match args.limit {
        Some(n) if n < set.len() => set.select(&(0..n).collect::<Vec<_>>()),
        _ => Ok(set),
    }
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

fn run_train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.model_spec()?;
    let (train_set, test_set) = cfg.load_datasets(&spec)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CacError::io(&cfg.output_dir, e))?;
    write_atomic(&cfg.output_dir.join("config.json"), cfg.to_json().as_bytes())?;
    let out = train(&spec, &cfg.train_config(), &train_set, test_set.as_ref(), Some(&cfg.output_dir))?;
    if let Some(last) = out.epochs.last() {
        eprintln!(
            "trained {} epochs: task loss {:.4}, train error {:.4}, cost ratio {:.4}",
            out.epochs.len(),
            last.task_loss,
            last.top1_error,
            last.cost_ratio_hard
        );
    }
    eprintln!(
        "wrote {} and {}",
        cfg.output_dir.join(CHECKPOINT_FILE).display(),
        cfg.output_dir.join(METRICS_FILE).display()
    );
    Ok(())
}

fn run_analyze(model: &Path, data: &DataArgs, out: &Path, totals: Option<&Path>) -> Result<()> {
    let m = load_checkpoint(model)?;
    let set = load_data(data, &m)?;
    let report = evaluate(&m, &set, data.batch_size)?.cost_report(m.spec())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| CacError::io(out, e))?;
    write_atomic(out, &csv)?;
    let totals_path = totals.map_or_else(|| out.with_extension("json"), Path::to_path_buf);
    write_atomic(&totals_path, json(&report.totals_json()).as_bytes())?;
    emit(&json(&report.totals_json()));
    Ok(())
}

fn run_export(model: &Path, image: usize, data: &DataArgs, out_dir: &Path) -> Result<()> {
    let m = load_checkpoint(model)?;
    let set = load_data(data, &m)?;
    if image >= set.len() {
        return Err(CacError::invalid(format!("image index {image} out of range for {} samples", set.len())));
    }
    let one = set.select(&[image])?;
    let fwd = m.forward(&one.images, Phase::Eval)?;
    if fwd.cac.is_empty() {
        return Err(CacError::invalid("model has no CAC layers"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CacError::io(out_dir, e))?;
    for rec in &fwd.cac {
        let path = out_dir.join(format!("{}_image{image}.csv", cac_core::ModelSpec::layer_id(rec.layer)));
        let mut buf = Vec::new();
        rec.partitions[0].write_csv(&mut buf).map_err(|e| CacError::io(&path, e))?;
        write_atomic(&path, &buf)?;
        emit(&format!("{}\trho_hard={:.6}", path.display(), rec.rho_hard[0]));
    }
    Ok(())
}

/// Bad arguments and malformed configs are usage errors; everything else is a run failure.
fn exit_code(e: &CacError) -> u8 {
    match e {
        CacError::InvalidArgument(_) | CacError::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => run_train(config),
        Command::Eval { model, data } => load_checkpoint(model).and_then(|m| {
            let set = load_data(data, &m)?;
            emit(&json(&evaluate(&m, &set, data.batch_size)?));
            Ok(())
        }),
        Command::Analyze { model, data, out, totals } => run_analyze(model, data, out, totals.as_deref()),
        Command::ExportRatios { model, image, data, out_dir } => run_export(model, *image, data, out_dir),
        Command::Verify => {
            let report = verify::run_all();
            emit(&json(&report));
            if !report.passed {
                for f in report.failures() {
                    eprintln!("FAILED {}: {}", f.name, f.detail);
                }
                return ExitCode::from(1);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
