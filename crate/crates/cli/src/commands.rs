use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mqmha::gradcheck::run_suite;
use mqmha::harness::{evaluate_scores, generate_dataset, train, Dataset, Model, SyntheticSpeakerSpec};
use mqmha::metrics::{format_scores, TrialList};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{emit_report, Report, ReportRow};
use crate::sweep::{run_sweep, Axis, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "mqmha", version, about = "Attentive pooling and inter-topK loss experiments on synthetic speakers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `$MQMHA_OUTPUT_ROOT/<command>`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speaker dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        noise_scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a saved dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a trial list with a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trial list; defaults to the dataset's own.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Run an ablation grid and print its results table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis to sweep; both when omitted.
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training steps per grid point.
        #[arg(long)]
        steps: Option<usize>,
        /// Run grid points concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { CliError::Usage(String::new()).exit_code() } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenData {
            common,
            speakers,
            noise_scale,
            seed,
        } => gen_data(common, speakers, noise_scale, seed),
        Command::Train {
            common,
            data,
            steps,
            lr,
            batch_size,
            seed,
        } => {
            let (mut config, dataset) = config_with_dataset(&common, data)?;
            if let Some(v) = steps {
                config.train.max_steps = v;
            }
            if let Some(v) = lr {
                config.train.learning_rate = v;
            }
            if let Some(v) = batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = seed {
                config.train.seed = v;
            }
            config.validate()?;
            run_train(&config, &dataset, &config.output_dir_for("train"))
        }
        Command::Eval {
            common,
            model,
            data,
            trials,
        } => {
            let (config, dataset) = config_with_dataset(&common, data)?;
            run_eval(&config, &dataset, &model, trials.as_deref())
        }
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances),
        Command::Sweep {
            common,
            axis,
            data,
            steps,
            parallel,
        } => {
            let mut config = base_config(&common)?;
            if let Some(v) = steps {
                config.sweep.max_steps = v;
            }
            let dataset = match data.or_else(|| config.data_dir.clone()) {
                Some(dir) => {
                    let dataset = load_dataset(&dir)?;
                    config = resolve(&common, Some(dataset.spec.clone()))?;
                    if let Some(v) = steps {
                        config.sweep.max_steps = v;
                    }
                    dataset
                }
                None => {
                    config.validate()?;
                    let spec = SyntheticSpeakerSpec {
                        noise_scale: config.sweep.noise_scale,
                        ..config.data.clone()
                    };
                    generate_dataset(&spec)?
                }
            };
            config.validate()?;
            let axes = match axis {
                Some(a) => vec![a],
                None => vec![Axis::Pooling, Axis::Loss],
            };
            let specs: Vec<SweepSpec> = axes.iter().map(|&a| SweepSpec::for_axis(a, &config)).collect();
            for spec in &specs {
                spec.validate(&config)?;
            }
            let out = config.output_dir_for("sweep");
            config.echo(&out)?;
            for spec in &specs {
                let dir = out.join(spec.axis.name());
                let report = run_sweep(spec, &config, &dataset, &dir, parallel)?;
                print!("{}", emit_report(&report, &dir.join("report.json"))?);
                println!();
            }
            Ok(())
        }
    }
}

/// Resolves `--config` (or the defaults), with the data section replaced by
/// `data` when given, and applies `--output-dir`.
fn resolve(common: &Common, data: Option<SyntheticSpeakerSpec>) -> CliResult<ExperimentConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?,
        None => "{}".to_owned(),
    };
    let mut config = match data {
        Some(spec) => ExperimentConfig::from_json_with_data(&text, spec)?,
        None => ExperimentConfig::from_json(&text)?,
    };
    if let Some(dir) = &common.output_dir {
        config.output_dir = Some(dir.clone());
    }
    Ok(config)
}

fn base_config(common: &Common) -> CliResult<ExperimentConfig> {
    resolve(common, None)
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!(
            "data_dir: {} is not a dataset directory",
            dir.display()
        )));
    }
    Dataset::load(dir).map_err(|e| CliError::Validation(format!("data_dir: {}: {e}", dir.display())))
}

/// The experiment config re-resolved against the saved dataset named by
/// `--data` or `data_dir`.
fn config_with_dataset(common: &Common, data: Option<PathBuf>) -> CliResult<(ExperimentConfig, Dataset)> {
    let base = base_config(common)?;
    let Some(dir) = data.or(base.data_dir) else {
        return Err(CliError::Validation(
            "data_dir: no dataset directory given (pass --data or set data_dir)".into(),
        ));
    };
    let dataset = load_dataset(&dir)?;
    let mut config = resolve(common, Some(dataset.spec.clone()))?;
    config.data_dir = Some(dir);
    Ok((config, dataset))
}

fn gen_data(common: Common, speakers: Option<usize>, noise: Option<f64>, seed: Option<u64>) -> CliResult<()> {
    let mut config = base_config(&common)?;
    if let Some(v) = speakers {
        config.data.num_speakers = v;
        config.loss.classes = v;
    }
    if let Some(v) = noise {
        config.data.noise_scale = v;
    }
    if let Some(v) = seed {
        config.data.seed = v;
    }
    config.data.validate().map_err(CliError::validation)?;
    let out = common
        .output_dir
        .clone()
        .or_else(|| config.data_dir.clone())
        .unwrap_or_else(|| config.output_dir_for("data"));
    let dataset = generate_dataset(&config.data)?;
    dataset.save(&out)?;
    println!(
        "wrote {} utterances ({} trials) to {}",
        dataset.utterances.len(),
        dataset.trials.entries.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: &ExperimentConfig, dataset: &Dataset, out: &Path) -> CliResult<()> {
    config.echo(out)?;
    let outcome = train(dataset, &config.encoder, &config.pooling, &config.loss, &config.train)?;
    outcome.model.save(&out.join("model.ckpt"))?;
    std::fs::write(
        out.join("trace.json"),
        serde_json::to_string_pretty(&outcome.trace)? + "\n",
    )?;
    let trace = &outcome.trace;
    println!(
        "trained {} steps: loss {:.6} -> {:.6}",
        trace.losses.len(),
        trace.initial().unwrap_or(f64::NAN),
        trace.final_mean(1).unwrap_or(f64::NAN)
    );
    for w in &trace.warnings {
        println!("warning: {w}");
    }
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

fn run_eval(config: &ExperimentConfig, dataset: &Dataset, model_path: &Path, trials: Option<&Path>) -> CliResult<()> {
    if !model_path.is_file() {
        return Err(CliError::Validation(format!(
            "model: {} does not exist",
            model_path.display()
        )));
    }
    let model = Model::load(model_path)?;
    let trials = match trials {
        Some(path) => TrialList::read(path)?,
        None => dataset.trials.clone(),
    };
    let (scores, report) = evaluate_scores(&model, dataset, &trials)?;
    let out = config.output_dir_for("eval");
    config.echo(&out)?;
    std::fs::write(out.join("scores.txt"), format_scores(&trials, &scores))?;
    let label = format!("{}; {}", model.config.pooling.label(), model.config.loss.label());
    let table = Report::new("Evaluation", vec![ReportRow::from_eval(label, &report)]);
    print!("{}", emit_report(&table, &out.join("report.json"))?);
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> CliResult<()> {
    if instances == 0 {
        return Err(CliError::Validation("instances: must be positive".into()));
    }
    let rows = run_suite(seed, instances)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:<width$}  {:>9}  {:>12}  {:>9}  status", "check", "instances", "max rel err", "tolerance");
    for r in &rows {
        println!(
            "{:<width$}  {:>9}  {:>12.3e}  {:>9.0e}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}
