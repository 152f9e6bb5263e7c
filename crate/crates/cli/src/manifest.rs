use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use referral::dataset::DatasetFiles;
use referral::experiment::Method;
use referral::features::{HospitalEncoding, Scenario, ScenarioConfig};
use referral::metrics::EvalConfig;
use referral::synthgen::GeneratorConfig;

pub const OUTPUT_DIR_ENV: &str = "REFERRAL_OUTPUT_DIR";
pub const THREADS_ENV: &str = "REFERRAL_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generator(GeneratorConfig),
    /// Directory holding the four dataset CSV files.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub test_fraction: f64,
    pub new_patient_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            test_fraction: 0.3,
            new_patient_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitParams,
    /// Entries like `S4` or `S2:distances`.
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<String>,
    #[serde(default)]
    pub r_min: f64,
    #[serde(default = "default_top_b")]
    pub top_b: usize,
    pub models: Vec<Method>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_scenarios() -> Vec<String> {
    Scenario::ALL.iter().map(|s| s.to_string()).collect()
}

fn default_top_b() -> usize {
    30
}

pub fn parse_scenario(s: &str) -> Result<ScenarioConfig> {
    let (name, encoding) = match s.split_once(':') {
        Some((n, e)) => (n, Some(e.parse::<HospitalEncoding>()?)),
        None => (s, None),
    };
    Ok(ScenarioConfig::new(name.parse::<Scenario>()?, encoding)?)
}

/// Label used for file names and report rows.
pub fn scenario_label(config: &ScenarioConfig) -> String {
    config.scenario.to_string()
}

impl Manifest {
    /// Reads a manifest and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let mut m: Manifest = toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if m.output_dir.is_relative() {
            m.output_dir = base.join(&m.output_dir);
        }
        if let DatasetSource::Path(p) = &mut m.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                m.output_dir = PathBuf::from(dir);
            }
        }
        Ok(m)
    }

    pub fn scenario_configs(&self) -> Result<Vec<ScenarioConfig>> {
        self.scenarios.iter().map(|s| parse_scenario(s).with_context(|| format!("scenario `{s}`"))).collect()
    }

    /// Checks everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let scenarios = self.scenario_configs()?;
        let labels: BTreeSet<String> = scenarios.iter().map(scenario_label).collect();
        if labels.len() != scenarios.len() {
            bail!("scenario list contains duplicates");
        }
        if self.models.is_empty() {
            bail!("no models listed");
        }
        let names: BTreeSet<&str> = self.models.iter().map(Method::name).collect();
        if names.len() != self.models.len() {
            bail!("each model type may appear only once");
        }
        if scenarios.is_empty() {
            bail!("at least one scenario is required");
        }
        for m in &self.models {
            m.validate().with_context(|| format!("model `{}`", m.name()))?;
        }
        let s = &self.split;
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            bail!("split.test_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&s.new_patient_fraction) {
            bail!("split.new_patient_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.r_min) {
            bail!("r_min must lie in [0, 1)");
        }
        if self.top_b == 0 {
            bail!("top_b must be positive");
        }
        self.eval.validate()?;
        match &self.dataset {
            DatasetSource::Generator(g) => g.validate()?,
            DatasetSource::Path(p) => {
                let files = DatasetFiles::in_dir(p);
                for f in [&files.interactions, &files.patients, &files.doctors, &files.hospitals] {
                    if !f.is_file() {
                        bail!("dataset file {} not found", f.display());
                    }
                }
            }
        }
        Ok(())
    }
}
