//! `ecgeq` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ecgeq::data::{self, load_dir, sanitize_file_stem, write_dir, SplitSpec, SynthSpec};
use ecgeq::equalizer::{channel_stats, cme_pipeline_with, CmeConfig, MagnitudeStatistic};
use ecgeq::experiment::{results_csv, run_experiment, ExperimentSpec};
use ecgeq::imbalance::{histogram_csv, longtail_counts, resample};
use ecgeq::losses::{gradcheck, LogBase, LossKind, LossSettings};
use ecgeq::train::{evaluate, train, Model, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ecgeq",
    version,
    about = "Channel-wise magnitude equalization and IWL loss for imbalanced ECG classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel magnitude statistics of a dataset.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CME-encode every record of a dataset into images.
    Encode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 500)]
        skip: usize,
        #[arg(long, default_value_t = 2500)]
        take: usize,
        #[arg(long, value_enum, default_value_t = Statistic::Rms)]
        statistic: Statistic,
        #[arg(long, value_enum, default_value_t = ImageFormat::Csv)]
        format: ImageFormat,
    },
    /// Subsample a dataset to the exponential long-tail profile.
    Resample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytical and finite-difference loss gradients.
    Gradcheck {
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 9)]
        classes: usize,
        /// IWL temperature.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum)]
        log_base: Option<Base>,
        /// Focal / CB-focal exponent.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        cb_beta: Option<f64>,
        #[arg(long)]
        ldam_mu: Option<f64>,
        #[arg(long)]
        ldam_s: Option<f64>,
    },
    /// Train a classifier on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Hold out a stratified test split, training on this fraction.
        #[arg(long, requires = "test_out")]
        split: Option<f64>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Where the held-out records are written.
        #[arg(long, requires = "split")]
        test_out: Option<PathBuf>,
    },
    /// Evaluate a trained model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid experiment and write the results table.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the data as-is instead of the long-tail profiles.
        #[arg(long)]
        no_resample: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Statistic {
    Rms,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ImageFormat {
    Csv,
    Raw,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Base {
    E,
    Ten,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<ecgeq::Error> for Failure {
    fn from(e: ecgeq::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn synth(spec: &Path, out: &Path) -> CmdResult {
    let spec = SynthSpec::from_toml(&read_text(spec)?)?;
    let dataset = data::generate_synthetic(&spec)?;
    write_dir(&dataset, out)?;
    eprintln!("wrote {} records to {}", dataset.len(), out.display());
    Ok(())
}

fn analyze(data: &Path, out: Option<&Path>) -> CmdResult {
    let dataset = load_dir(data)?;
    let stats = channel_stats(&dataset)?;
    emit(out, &stats.to_csv(dataset.class_names()))
}

fn encode(data: &Path, out: &Path, cfg: CmeConfig, format: ImageFormat) -> CmdResult {
    let dataset = load_dir(data)?;
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    for record in dataset.records() {
        let image = cme_pipeline_with(record, &cfg)?;
        let stem = sanitize_file_stem(record.record_id());
        match format {
            ImageFormat::Csv => image.write_csv(&out.join(format!("{stem}.csv")))?,
            ImageFormat::Raw => image.write_raw(&out.join(format!("{stem}.bin")))?,
        }
    }
    eprintln!("encoded {} records", dataset.len());
    Ok(())
}

fn resample_cmd(data: &Path, alpha: f64, seed: u64, out: &Path) -> CmdResult {
    let dataset = load_dir(data)?;
    let before = dataset.class_counts();
    let profile = longtail_counts(&before, alpha)?;
    let resampled = resample(&dataset, &profile, seed)?;
    write_dir(&resampled, out)?;
    let hist = histogram_csv(dataset.class_names(), &before, &resampled.class_counts());
    write_text(&out.join("histogram.csv"), &hist)
}

#[allow(clippy::too_many_arguments)]
fn gradcheck_cmd(
    loss: &str,
    trials: usize,
    seed: u64,
    threshold: f64,
    classes: usize,
    beta: Option<f64>,
    log_base: Option<Base>,
    gamma: Option<f64>,
    cb_beta: Option<f64>,
    ldam_mu: Option<f64>,
    ldam_s: Option<f64>,
) -> CmdResult {
    let kind: LossKind = loss
        .parse()
        .map_err(|e: ecgeq::Error| Failure::Usage(e.to_string()))?;
    let mut settings = LossSettings {
        loss: kind,
        ..LossSettings::default()
    };
    if let Some(b) = beta {
        settings.iwl.beta = b;
    }
    if let Some(base) = log_base {
        settings.iwl.log_base = match base {
            Base::E => LogBase::Natural,
            Base::Ten => LogBase::Ten,
        };
    }
    if let Some(g) = gamma {
        settings.focal.gamma = g;
    }
    if let Some(b) = cb_beta {
        settings.cb.beta = b;
    }
    if let Some(mu) = ldam_mu {
        settings.ldam.mu = mu;
    }
    if let Some(s) = ldam_s {
        settings.ldam.s = s;
    }
    let report = gradcheck(&settings, classes, trials, seed, threshold)?;
    println!(
        "loss={} trials={} max_relative_error={:e} threshold={:e} failures={}",
        kind,
        report.errors.len(),
        report.max_error(),
        threshold,
        report.failures()
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Verification(format!(
            "{} of {} gradient checks exceeded {threshold:e}",
            report.failures(),
            report.errors.len()
        )))
    }
}

fn train_cmd(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    split: Option<f64>,
    split_seed: u64,
    test_out: Option<&Path>,
) -> CmdResult {
    let cfg = match config {
        Some(path) => TrainConfig::from_toml(&read_text(path)?)?,
        None => TrainConfig::default(),
    };
    let dataset = load_dir(data)?;
    let train_set = match (split, test_out) {
        (Some(fraction), Some(test_dir)) => {
            let (train_set, test_set) =
                data::split(&dataset, &SplitSpec::new(fraction, split_seed)?)?;
            write_dir(&test_set, test_dir)?;
            train_set
        }
        _ => dataset,
    };
    let (model, train_log) = train(&train_set, &cfg)?;
    model.save(out)?;
    if let Some(path) = log {
        let mut text = String::from("epoch,loss\n");
        for (i, loss) in train_log.epoch_losses.iter().enumerate() {
            text.push_str(&format!("{},{}\n", i + 1, loss));
        }
        write_text(path, &text)?;
    }
    Ok(())
}

fn eval_cmd(model: &Path, data: &Path, out: Option<&Path>) -> CmdResult {
    let model = Model::load(model)?;
    let dataset = load_dir(data)?;
    let metrics = evaluate(&model, &dataset)?;
    emit(out, &metrics.to_csv(dataset.class_names()))
}

fn experiment_cmd(spec_path: &Path, out: &Path, no_resample: bool) -> CmdResult {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if no_resample {
        spec.data.resample = false;
    }
    let base = spec_path.parent().unwrap_or_else(|| Path::new("."));
    let rows = run_experiment(&spec, base)?;
    write_text(out, &results_csv(&rows))?;
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Analyze { data, out } => analyze(&data, out.as_deref()),
        Command::Encode {
            data,
            out,
            height,
            width,
            skip,
            take,
            statistic,
            format,
        } => {
            let cfg = CmeConfig {
                skip,
                take,
                height,
                width,
                statistic: match statistic {
                    Statistic::Rms => MagnitudeStatistic::Rms,
                    Statistic::L2 => MagnitudeStatistic::L2Norm,
                },
            };
            encode(&data, &out, cfg, format)
        }
        Command::Resample {
            data,
            alpha,
            seed,
            out,
        } => resample_cmd(&data, alpha, seed, &out),
        Command::Gradcheck {
            loss,
            trials,
            seed,
            threshold,
            classes,
            beta,
            log_base,
            gamma,
            cb_beta,
            ldam_mu,
            ldam_s,
        } => gradcheck_cmd(
            &loss, trials, seed, threshold, classes, beta, log_base, gamma, cb_beta, ldam_mu,
            ldam_s,
        ),
        Command::Train {
            data,
            config,
            out,
            log,
            split,
            split_seed,
            test_out,
        } => train_cmd(
            &data,
            config.as_deref(),
            &out,
            log.as_deref(),
            split,
            split_seed,
            test_out.as_deref(),
        ),
        Command::Eval { model, data, out } => eval_cmd(&model, &data, out.as_deref()),
        Command::Experiment {
            spec,
            out,
            no_resample,
        } => experiment_cmd(&spec, &out, no_resample),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
