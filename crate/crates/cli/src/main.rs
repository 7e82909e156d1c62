//! `sstdunet`: train, apply and evaluate the skull-stripping network, run
//! noise-robustness sweeps and functional-connectivity comparisons.
//!
//! Progress is logged as JSON lines on stderr. Failures end with one
//! `{"event":"error","category":…,"message":…}` line and a nonzero exit code
//! (see [`exit_code`]).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sstdunet_core::metrics::{Alternative, Metric, MetricsReport};
use sstdunet_core::pipeline::{
    evaluate, gradcheck_suite, load_eval_items, noise_sweep, run_fc, sweep_levels, train, write_sweep_csv,
    JsonLogger, PipelineConfig, PostConfig, Predictor,
};
use sstdunet_core::post::Connectivity;
use sstdunet_core::volio::{read_manifest, read_nifti, write_nifti, Datatype, Volume, WriteOptions};
use sstdunet_core::Error;

#[derive(Parser)]
#[command(name = "sstdunet", version, about = "Skull stripping for preclinical fMRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML configuration.
    Train(TrainArgs),
    /// Skull-strip one NIfTI volume.
    Predict(PredictArgs),
    /// Score a checkpoint on a manifest with ground-truth masks.
    Evaluate(EvaluateArgs),
    /// Evaluate under increasing Rician noise.
    NoiseSweep(NoiseSweepArgs),
    /// Compare functional connectivity of two preprocessing pipelines.
    FcAnalyze(ConfigArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PostArgs {
    /// Probability threshold for the brain mask.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Connected-component adjacency (6 or 26).
    #[arg(long, default_value_t = 26)]
    connectivity: u8,
}

impl PostArgs {
    fn config(&self) -> Result<PostConfig, Error> {
        let post = PostConfig {
            threshold: self.threshold,
            connectivity: Connectivity::try_from(self.connectivity)?,
        };
        post.validate()?;
        Ok(post)
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input volume (NIfTI-1); 4-D series are not accepted.
    #[arg(long)]
    input: PathBuf,
    /// Output brain mask (uint8 NIfTI on the input grid).
    #[arg(long)]
    output: PathBuf,
    /// Optional output of the raw probability map (model grid).
    #[arg(long)]
    probability: Option<PathBuf>,
    #[command(flatten)]
    post: PostArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines manifest; entries need `mask`.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-subject CSV report.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Full JSON report.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Earlier JSON report to compare against with a paired t-test.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Metric of the paired comparison.
    #[arg(long, default_value = "dice", value_parser = parse_metric)]
    metric: Metric,
    #[command(flatten)]
    post: PostArgs,
}

#[derive(Args)]
struct NoiseSweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV with one row per noise level.
    #[arg(long)]
    output: PathBuf,
    /// Seed of the noise realizations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the noise-free control row.
    #[arg(long)]
    no_control: bool,
    #[command(flatten)]
    post: PostArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown metric {s:?} (dice, ppv, hd, sen)"))
}

/// Failure of a command: a library error or a failed gradient check.
enum Failure {
    Lib(Error),
    Gradcheck(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn category(&self) -> &'static str {
        match self {
            Failure::Lib(e) => e.category(),
            Failure::Gradcheck(_) => "gradcheck",
            Failure::Usage(_) => "usage",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Gradcheck(m) | Failure::Usage(m) => m.clone(),
        }
    }
}

/// Exit code of an error category.
fn exit_code(category: &str) -> u8 {
    match category {
        "usage" | "config" => 2,
        "gradcheck" => 3,
        "io" | "format" | "checkpoint" => 4,
        "training" | "degenerate_mask" => 5,
        _ => 6,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io { path: path.to_owned(), source })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_owned(), source })
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    if !args.config.is_file() {
        return Err(Failure::Usage(format!("configuration file {} does not exist", args.config.display())));
    }
    Ok(PipelineConfig::load(&args.config, &args.overrides)?)
}

fn run(cli: Cli, log: &JsonLogger) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            let (outcome, artifacts) = train(&cfg, log)?;
            log.event(
                "train_done",
                json!({
                    "epochs": outcome.epochs.len(),
                    "steps": outcome.steps,
                    "best_epoch": outcome.best_epoch,
                    "best_score": outcome.best_score,
                    "stop": outcome.stop,
                    "best_checkpoint": artifacts.best_checkpoint,
                    "last_checkpoint": artifacts.last_checkpoint,
                }),
            );
        }
        Command::Predict(a) => {
            let p = Predictor::from_checkpoint(&a.checkpoint, a.post.config()?)?;
            let input = read_nifti(&a.input)?;
            let pred = p.predict(&input)?;
            let mask = Volume::new(pred.mask.shape(), pred.mask.to_values(), input.spacing)?;
            let opts = WriteOptions {
                datatype: Datatype::Uint8,
                ..WriteOptions::default()
            };
            write_nifti(&mask, &a.output, &opts)?;
            if let Some(path) = &a.probability {
                write_nifti(&pred.probability, path, &WriteOptions::default())?;
            }
            log.event(
                "predict_done",
                json!({"output": a.output, "voxels": pred.mask.count(), "seconds": pred.seconds}),
            );
        }
        Command::Evaluate(a) => {
            let p = Predictor::from_checkpoint(&a.checkpoint, a.post.config()?)?;
            let eval = evaluate(&p, &read_manifest(&a.manifest)?)?;
            if let Some(path) = &a.csv {
                eval.report.save_csv(path)?;
            }
            if let Some(path) = &a.json {
                eval.report.save_json(path)?;
            }
            let agg = &eval.report.aggregate;
            log.event(
                "evaluate_done",
                json!({
                    "subjects": eval.report.rows.len(),
                    "missing": eval.missing,
                    "dice_mean": agg.dice.mean,
                    "ppv_mean": agg.ppv.mean,
                    "hd_mean": agg.hd.mean,
                    "sen_mean": agg.sen.mean,
                    "mean_seconds": eval.mean_seconds,
                }),
            );
            if let Some(path) = &a.compare {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
                let other: MetricsReport = serde_json::from_str(&text).map_err(Error::from)?;
                let test = eval.report.paired_test(&other, a.metric, Alternative::TwoSided)?;
                log.event("paired_test", json!({"metric": a.metric, "against": path, "result": test}));
            }
        }
        Command::NoiseSweep(a) => {
            let p = Predictor::from_checkpoint(&a.checkpoint, a.post.config()?)?;
            let items = load_eval_items(&read_manifest(&a.manifest)?)?;
            let results = noise_sweep(&p, &items, &sweep_levels(!a.no_control), a.seed)?;
            write_sweep_csv(&results, create(&a.output)?)?;
            for r in &results {
                log.event(
                    "noise_level",
                    json!({"level": r.level, "dice_mean": r.evaluation.report.aggregate.dice.mean}),
                );
            }
        }
        Command::FcAnalyze(a) => {
            let cfg = load_config(&a)?;
            let result = run_fc(&cfg.fc)?;
            let out = cfg.data.output_dir.join("fc.json");
            std::fs::create_dir_all(&cfg.data.output_dir)
                .map_err(|source| Error::Io { path: cfg.data.output_dir.clone(), source })?;
            write_json(&out, &result)?;
            log.event(
                "fc_done",
                json!({
                    "output": out,
                    "pairs": result.informative,
                    "slope": result.comparison.slope,
                    "intercept": result.comparison.intercept,
                    "r": result.comparison.r,
                }),
            );
        }
        Command::Gradcheck(a) => {
            let suite = gradcheck_suite(a.seed)?;
            for c in &suite.cases {
                log.event(
                    "gradcheck",
                    json!({
                        "case": c.name,
                        "max_rel_error": c.report.max_rel_error,
                        "tolerance": c.report.tolerance,
                        "passed": c.report.passed(),
                    }),
                );
            }
            if let Some(path) = &a.output {
                write_json(path, &suite)?;
            }
            let failed: Vec<&str> = suite.failures().iter().map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Gradcheck(format!("gradient mismatch in {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let log = JsonLogger::stderr();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => Failure::Usage(e.to_string()).report(&log),
    };
    match run(cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(&log),
    }
}

impl Failure {
    fn report(self, log: &JsonLogger) -> ! {
        let category = self.category();
        log.event("error", json!({"category": category, "message": self.message()}));
        std::process::exit(exit_code(category).into())
    }
}
