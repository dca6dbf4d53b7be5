use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrhmm::dataio::{self, SensorSet};
use lrhmm::experiment::{self, DataSource, ExperimentConfig};
use lrhmm::{HmmError, LrHmmModel, ObservationSequence, Result};

#[derive(Parser, Debug)]
#[command(name = "lrhmm", version, about = "Left-right HMM motion classification and forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for every random component; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory of sequence CSV files; replaces synthetic data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelInputs {
    #[arg(long)]
    model1: PathBuf,
    #[arg(long)]
    model2: PathBuf,
    /// Sequence CSV file or directory.
    #[arg(long)]
    input: PathBuf,
    /// History length in seconds; defaults to the whole trial up to the model horizon.
    #[arg(long)]
    history_s: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write raw synthetic trials as `<out>/<sensor>/c<label>_trial<k>.csv`.
    Generate,
    /// Train one model per sensor and class on every prepared trial.
    Train {
        /// Restrict training to one sensor.
        #[arg(long)]
        sensor: Option<String>,
    },
    /// Classify trials with two saved models.
    Classify {
        #[command(flatten)]
        inputs: ModelInputs,
    },
    /// Forecast trials with two saved models, or run the hold-out demo when no
    /// models are given.
    Forecast {
        #[arg(long, requires_all = ["model2", "input"])]
        model1: Option<PathBuf>,
        #[arg(long)]
        model2: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        history_s: f64,
    },
    /// Mean cross-fitness distance per sensor.
    Distance,
    /// Classification accuracy against history duration.
    AccuracyCurve {
        /// `start:end:step` or a comma list, in seconds.
        #[arg(long)]
        durations: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HmmError::usage(format!("--threads: {e}")))?;
    }
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out)?;

    match cli.command {
        Command::Generate => generate(&cfg, out),
        Command::Train { sensor } => train(&cfg, sensor.as_deref(), out),
        Command::Classify { inputs } => classify(&cfg, &inputs, out),
        Command::Forecast {
            model1: Some(model1),
            model2: Some(model2),
            input: Some(input),
            history_s,
        } => {
            let inputs = ModelInputs {
                model1,
                model2,
                input,
                history_s: Some(history_s),
            };
            forecast_files(&cfg, &inputs, out)
        }
        Command::Forecast { history_s, .. } => {
            let demo = experiment::run_forecast_demo(&cfg, history_s, out)?;
            let (covered, total) = demo.coverage();
            println!(
                "wrote {} files; band coverage on correctly classified trials {covered}/{total}",
                demo.files.len()
            );
            Ok(())
        }
        Command::Distance => {
            let table = experiment::run_distance_experiment(&cfg)?;
            let path = out.join("distance.csv");
            table.write_csv(File::create(&path)?)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::AccuracyCurve { durations } => {
            let mut cfg = cfg;
            if let Some(d) = durations {
                cfg.history_durations = experiment::parse_durations(&d)?;
            }
            let curve = experiment::run_accuracy_experiment(&cfg)?;
            let path = out.join("accuracy.csv");
            curve.write_csv(File::create(&path)?)?;
            println!("wrote {} ({} resampled repetitions)", path.display(), curve.resampled);
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| HmmError::usage(format!("cannot read config {}: {e}", path.display())))?;
            experiment::parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &common.data {
        cfg.source = DataSource::Directory(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let DataSource::Synthetic(pair) = &cfg.source else {
        return Err(HmmError::usage("generate needs a synthetic configuration, not a data directory"));
    };
    let mut n_files = 0;
    for class in [&pair.class1, &pair.class2] {
        let sets: Vec<SensorSet> = dataio::generate_synthetic(class, &pair.artifact_levels)?;
        for set in sets {
            let dir = out.join(&set.sensor_id);
            fs::create_dir_all(&dir)?;
            for seq in &set.sequences {
                let name = format!("c{}_trial{:03}.csv", class.label, seq.trial_id);
                dataio::save_csv(seq, &dir.join(name))?;
                n_files += 1;
            }
        }
    }
    println!("wrote {n_files} trials under {}", out.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, only: Option<&str>, out: &Path) -> Result<()> {
    let data = experiment::prepare_data(cfg)?;
    let selected: Vec<_> = data
        .iter()
        .filter(|s| only.map_or(true, |id| s.sensor_id == id))
        .collect();
    if selected.is_empty() {
        return Err(HmmError::usage(format!("no sensor named {:?}", only.unwrap_or(""))));
    }
    let mut summary = csv::Writer::from_path(out.join("training.csv"))?;
    summary.write_record(["sensor", "class", "iterations", "converged", "log_likelihood"])?;
    for s in selected {
        for (c, seqs) in s.classes.iter().enumerate() {
            let (model, trace) = lrhmm::baum_welch(seqs, &cfg.training)
                .map_err(|e| e.context(format!("training {} class {}", s.sensor_id, c + 1)))?;
            model.save(&out.join(format!("{}_class{}.json", s.sensor_id, c + 1)))?;
            let ll = trace.log_likelihoods.last().copied().unwrap_or(f64::NAN);
            summary.write_record([
                s.sensor_id.clone(),
                (c + 1).to_string(),
                trace.iterations_run.to_string(),
                trace.converged.to_string(),
                ll.to_string(),
            ])?;
        }
    }
    summary.flush()?;
    println!("wrote models under {}", out.display());
    Ok(())
}

/// Loads both models and the scaled input trials, each cut to its history.
fn load_inputs(
    cfg: &ExperimentConfig,
    inputs: &ModelInputs,
) -> Result<(LrHmmModel, LrHmmModel, Vec<(ObservationSequence, ObservationSequence)>)> {
    let m1 = LrHmmModel::load(&inputs.model1).map_err(|e| e.context("loading --model1"))?;
    let m2 = LrHmmModel::load(&inputs.model2).map_err(|e| e.context("loading --model2"))?;
    let raw = if inputs.input.is_dir() {
        dataio::load_dir(&inputs.input)?
    } else {
        dataio::load_csv(&inputs.input)?
    };
    if raw.is_empty() {
        return Err(HmmError::usage(format!("no trials in {}", inputs.input.display())));
    }
    let mut out = Vec::with_capacity(raw.len());
    for seq in raw {
        let channels: Vec<usize> = (0..seq.n_dims()).collect();
        let scaled = dataio::preprocess(std::slice::from_ref(&seq), cfg.scale_divisor, &channels, false)?
            .remove(0);
        let steps = match inputs.history_s {
            Some(h) if h > 0.0 => ((h / scaled.dt).round() as usize).max(1),
            Some(h) => return Err(HmmError::usage(format!("--history-s {h} must be positive"))),
            None => scaled.len().min(m1.n_states()),
        };
        if steps > scaled.len() {
            return Err(HmmError::usage(format!(
                "history of {steps} steps exceeds trial {} with {} steps",
                scaled.trial_id,
                scaled.len()
            )));
        }
        let history = scaled.truncated(steps)?;
        out.push((scaled, history));
    }
    Ok((m1, m2, out))
}

fn classify(cfg: &ExperimentConfig, inputs: &ModelInputs, out: &Path) -> Result<()> {
    let (m1, m2, trials) = load_inputs(cfg, inputs)?;
    let path = out.join("classify.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "sensor",
        "trial_id",
        "true_label",
        "predicted",
        "loglik_1",
        "loglik_2",
        "margin",
    ])?;
    for (seq, history) in &trials {
        let d = lrhmm::classify(history, &m1, &m2)
            .map_err(|e| e.context(format!("trial {}", seq.trial_id)))?;
        w.write_record([
            seq.sensor_id.clone(),
            seq.trial_id.to_string(),
            seq.label.map(|l| l.to_string()).unwrap_or_default(),
            d.label.to_string(),
            d.log_likelihoods[0].to_string(),
            d.log_likelihoods[1].to_string(),
            d.margin.to_string(),
        ])?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn forecast_files(cfg: &ExperimentConfig, inputs: &ModelInputs, out: &Path) -> Result<()> {
    let (m1, m2, trials) = load_inputs(cfg, inputs)?;
    for (seq, history) in &trials {
        let pt = lrhmm::forecast(history, &m1, &m2)
            .map_err(|e| e.context(format!("trial {}", seq.trial_id)))?;
        let rows = lrhmm::export_forecast(&pt, seq.dt);
        let path = out.join(format!(
            "forecast_{}_c{}_trial{:03}.csv",
            seq.sensor_id,
            seq.label.unwrap_or(0),
            seq.trial_id
        ));
        let mut f = File::create(&path)?;
        lrhmm::forecast::write_forecast_csv(&rows, &mut f)?;
        f.flush()?;
    }
    println!("wrote {} forecasts under {}", trials.len(), out.display());
    Ok(())
}
