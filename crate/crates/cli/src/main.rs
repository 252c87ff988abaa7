use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ked::error::Error;
use ked::eval::{compare_runs, read_reports};
use ked::experiment::{ExperimentConfig, Pipeline, Stage, REPORTS};

/// Knowledge explaining distillation experiments.
///
/// Exit status: 0 on success, 2 for an invalid configuration, 3 when a
/// stage fails.
#[derive(Parser, Debug)]
#[command(name = "ked", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the dataset and write the train/test caches.
    Ingest(StageArgs),
    /// Train the black-box teacher.
    TrainTeacher(StageArgs),
    /// Build the superfeature partition.
    FindSuperfeatures(StageArgs),
    /// Train the type-M teacher on the partition.
    TrainExplainingTeacher(StageArgs),
    /// Train every configured student variant.
    Distill(StageArgs),
    /// Fine-tune the KED student on chimeric samples.
    ChimericFinetune(StageArgs),
    /// Bootstrap every finished model on the test set.
    Evaluate(StageArgs),
    /// Run all stages, skipping those already up to date.
    Run(StageArgs),
    /// Print the resolved configuration.
    ShowConfig(ConfigArgs),
    /// Tabulate report files that share a test set.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set distill.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Same as `--set output_dir=...`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Same as `--set seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Same as `--set replicate=...`.
    #[arg(long)]
    replicate: Option<u64>,
    /// Same as `--set superfeatures=...`.
    #[arg(long)]
    superfeatures: Option<usize>,
    /// Same as `--set student_samples=...`.
    #[arg(long)]
    student_samples: Option<usize>,
    /// Same as `--set teacher_samples=...`.
    #[arg(long)]
    teacher_samples: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(d) = &self.output_dir {
            // Quoted so the path stays a string.
            out.push(format!(
                "output_dir={}",
                toml_string(&d.display().to_string())
            ));
        }
        let pairs = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("replicate", self.replicate.map(|v| v.to_string())),
            ("superfeatures", self.superfeatures.map(|v| v.to_string())),
            (
                "student_samples",
                self.student_samples.map(|v| v.to_string()),
            ),
            (
                "teacher_samples",
                self.teacher_samples.map(|v| v.to_string()),
            ),
        ];
        out.extend(
            pairs
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))),
        );
        // Explicit --set wins over the sugar flags.
        out.extend(self.set.iter().cloned());
        out
    }

    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(&self.config, &self.overrides())
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Rerun the stage even if its outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Report files (line-delimited JSON).
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Config(Error),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e),
            other => Failure::Stage(other),
        }
    }
}

fn pipeline(args: &StageArgs) -> Result<Pipeline, Failure> {
    let cfg = args.config.load().map_err(Failure::Config)?;
    // Directory creation problems count as configuration errors too.
    Pipeline::new(cfg).map_err(Failure::Config)
}

fn print_reports(p: &Pipeline) -> Result<(), Failure> {
    let table = std::fs::read_to_string(p.path("comparison.txt")).unwrap_or_default();
    print!("{table}");
    println!("reports: {}", p.path(REPORTS).display());
    Ok(())
}

fn stage(args: &StageArgs, stage: Stage) -> Result<(), Failure> {
    let p = pipeline(args)?;
    p.run_stage(stage, args.force)?;
    if stage == Stage::Evaluate {
        print_reports(&p)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest(a) => stage(&a, Stage::Ingest),
        Command::TrainTeacher(a) => stage(&a, Stage::TrainTeacher),
        Command::FindSuperfeatures(a) => stage(&a, Stage::FindSuperfeatures),
        Command::TrainExplainingTeacher(a) => stage(&a, Stage::TrainExplainingTeacher),
        Command::Distill(a) => stage(&a, Stage::Distill),
        Command::ChimericFinetune(a) => stage(&a, Stage::ChimericFinetune),
        Command::Evaluate(a) => stage(&a, Stage::Evaluate),
        Command::Run(a) => {
            let p = pipeline(&a)?;
            if a.force {
                for s in Stage::ALL {
                    p.run_stage(s, true)?;
                }
            } else {
                p.run_all()?;
            }
            print_reports(&p)
        }
        Command::ShowConfig(a) => {
            print!("{}", a.load().map_err(Failure::Config)?.to_toml());
            Ok(())
        }
        Command::Compare(a) => {
            let mut reports = Vec::new();
            for path in &a.reports {
                reports.extend(read_reports(path)?);
            }
            let cmp = compare_runs(&reports)?;
            print!("{}", cmp.to_text());
            if let Some(path) = a.csv {
                std::fs::write(&path, cmp.to_csv())
                    .map_err(|e| Failure::Stage(Error::Io { path, source: e }))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("stage failed: {e}");
            ExitCode::from(3)
        }
    }
}
