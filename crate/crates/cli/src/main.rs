mod manifest;
mod pipeline;
mod report;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use referral::experiment::{Method, Partition};
use referral::metrics::{EvalConfig, EvalReport, Propensities};
use referral::synthgen::GeneratorConfig;

use manifest::{parse_scenario, Manifest, THREADS_ENV};
use pipeline::Stage;

#[derive(Parser, Debug)]
#[command(name = "referral", version, about = "Doctor recommendation experiments: generate, split, encode, train, predict, evaluate, report")]
struct Cli {
    /// Run the pipeline described by this TOML manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Stop after this stage.
    #[arg(long, value_enum, default_value = "report")]
    stage: Stage,
    /// Serial, single-threaded execution.
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        /// TOML generator config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporal train/test split with new-patient holdout.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0.15)]
        new_fraction: f64,
    },
    /// Encode features and labels for one scenario.
    Encode {
        #[arg(long)]
        data: PathBuf,
        /// split.json written by `split`.
        #[arg(long)]
        split: PathBuf,
        /// S1 to S5, optionally with `:visits` or `:distances`.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        encoding: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        r_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model and save it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Directory written by `encode`.
        #[arg(long)]
        features: Option<PathBuf>,
        /// xml, popularity, mf or hybrid_mf.
        #[arg(long)]
        method: String,
        /// TOML hyperparameters for the method.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        r_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank doctors for one partition.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test_seen")]
        partition: String,
        #[arg(long, default_value_t = 30)]
        top_b: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against a label file.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Train labels for propensities; uniform weights when absent.
        #[arg(long)]
        train_labels: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        method: String,
        #[arg(long, default_value = "-")]
        scenario: String,
        #[arg(long, default_value = "test_seen")]
        partition: String,
        /// TOML evaluation config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render markdown tables and a plot-ready CSV from a report CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a manifest.
    Run {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "report")]
        stage: Stage,
    },
}

enum Failure {
    Validation(anyhow::Error),
    Stage(&'static str, anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(name, e.into()))
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn read_method(name: &str, config: Option<&Path>) -> Result<Method> {
    let mut table: toml::Table = read_toml(config)?;
    if table.contains_key("type") {
        bail!("method config must not set `type`; use --method");
    }
    table.insert("type".into(), toml::Value::String(name.into()));
    let method: Method = table.try_into().with_context(|| format!("method `{name}`"))?;
    method.validate()?;
    Ok(method)
}

fn scenario_arg(scenario: &str, encoding: Option<&str>) -> Result<referral::features::ScenarioConfig> {
    match encoding {
        Some(_) if scenario.contains(':') => bail!("encoding given twice for `{scenario}`"),
        Some(e) => parse_scenario(&format!("{scenario}:{e}")),
        None => parse_scenario(scenario),
    }
}

fn check_unit(name: &str, v: f64, open_low: bool) -> Result<()> {
    let ok = if open_low { v > 0.0 && v < 1.0 } else { (0.0..=1.0).contains(&v) };
    if !ok {
        bail!("{name} out of range: {v}");
    }
    Ok(())
}

fn print_all_cells(report: &EvalReport) {
    for r in report.rows.iter().filter(|r| r.specialty == "All") {
        let v = r.value.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        println!("{}@{}\t{v}", r.metric, r.k);
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let parallel = !cli.strict;
    let threads = if cli.strict { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Validation(anyhow::anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().invalid()?;
    }

    let (manifest_path, through) = match (cli.command, cli.manifest) {
        (Some(Command::Run { manifest, stage }), None) => (manifest, stage),
        (Some(Command::Run { .. }), Some(_)) => {
            return Err(Failure::Validation(anyhow::anyhow!("give the manifest either as --manifest or to `run`")));
        }
        (None, Some(m)) => (m, cli.stage),
        (None, None) => return Err(Failure::Validation(anyhow::anyhow!("nothing to do: pass --manifest or a subcommand"))),
        (Some(_), Some(_)) => return Err(Failure::Validation(anyhow::anyhow!("--manifest cannot be combined with a subcommand"))),
        (Some(cmd), None) => return subcommand(cmd, cli.seed, parallel),
    };
    let mut manifest = Manifest::load(&manifest_path).invalid()?;
    if let Some(s) = cli.seed {
        manifest.seed = s;
    }
    manifest.validate().invalid()?;
    pipeline::run(&manifest, through, parallel).stage("pipeline")?;
    Ok(())
}

fn subcommand(cmd: Command, seed_override: Option<u64>, parallel: bool) -> Result<(), Failure> {
    let seed = seed_override.unwrap_or(0);
    match cmd {
        Command::Generate { config, out } => {
            let config: GeneratorConfig = read_toml(config.as_deref()).invalid()?;
            config.validate().invalid()?;
            stages::generate_stage(&config, seed, &out).stage("generate")?;
        }
        Command::Split { data, out, test_fraction, new_fraction } => {
            check_unit("test fraction", test_fraction, true).invalid()?;
            check_unit("new-patient fraction", new_fraction, false).invalid()?;
            let summary = stages::split_stage(&data, test_fraction, new_fraction, seed, &out).stage("split")?;
            print!("{summary}");
        }
        Command::Encode { data, split, scenario, encoding, r_min, out } => {
            let scenario = scenario_arg(&scenario, encoding.as_deref()).invalid()?;
            check_unit("r_min", r_min, false).invalid()?;
            let prep = stages::load_prepared(&data, &split, r_min, &EvalConfig::default()).stage("encode")?;
            stages::encode_stage(&prep, scenario, &out).stage("encode")?;
        }
        Command::Train { data, split, features, method, config, r_min, out } => {
            let mut method = read_method(&method, config.as_deref()).invalid()?;
            if let Some(s) = seed_override {
                method = method.with_seed(s);
            }
            if method.uses_features() && features.is_none() {
                return Err(Failure::Validation(anyhow::anyhow!("method `{}` needs --features", method.name())));
            }
            check_unit("r_min", r_min, false).invalid()?;
            let prep = stages::load_prepared(&data, &split, r_min, &EvalConfig::default()).stage("train")?;
            stages::train_stage(&prep, features.as_deref(), &method, seed, &out).stage("train")?;
        }
        Command::Predict { data, features, model, partition, top_b, out } => {
            let partition: Partition = partition.parse().invalid()?;
            if top_b == 0 {
                return Err(Failure::Validation(anyhow::anyhow!("--top-b must be positive")));
            }
            let catalog = stages::load_data(&data).stage("predict")?.catalog;
            stages::predict_stage(&catalog, &features, &model, partition, top_b, parallel, &out).stage("predict")?;
        }
        Command::Evaluate { data, predictions, labels, train_labels, method, scenario, partition, config, out } => {
            let eval: EvalConfig = read_toml(config.as_deref()).invalid()?;
            eval.validate().invalid()?;
            let catalog = stages::load_data(&data).stage("evaluate")?.catalog;
            let preds = stages::read_prediction_file(&predictions, &catalog).stage("evaluate")?;
            let relevant = stages::read_labels(&labels, &catalog).stage("evaluate")?;
            let props = match train_labels {
                Some(p) => {
                    let train = stages::read_labels(&p, &catalog).stage("evaluate")?;
                    stages::train_propensities(&train, catalog.n_doctors(), &eval).stage("evaluate")?
                }
                None => Propensities::uniform(catalog.n_doctors()),
            };
            let aligned = stages::align(preds, relevant);
            let mut report = EvalReport::new();
            stages::evaluate_groups(&mut report, &method, &scenario, &partition, &aligned, &props, &eval, &catalog)
                .stage("evaluate")?;
            print_all_cells(&report);
            if let Some(out) = out {
                if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).stage("evaluate")?;
                }
                report.save_csv(&out).stage("evaluate")?;
            }
        }
        Command::Report { input, out } => {
            let tables = report::report_stage(&input, &out).stage("report")?;
            print!("{tables}");
        }
        Command::Run { .. } => unreachable!("handled by execute"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(name, e)) => {
            eprintln!("error in {name}: {e:#}");
            ExitCode::from(3)
        }
    }
}
