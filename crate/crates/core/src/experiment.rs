//! Pipeline glue: labels and propensities from a split, per-scenario
//! matrices, model fitting, prediction and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{train_hybrid_mf, train_mf, train_popularity, HybridConfig, MfConfig};
use crate::dataset::{ConsultationDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::features::{Encoder, ScenarioConfig};
use crate::labels::{build_ratings, threshold_labels, LabelMatrix, RatingMatrix};
use crate::metrics::{diversity_report, evaluate, fit_propensities, DiversityReport, EvalConfig, EvalReport, Propensities};
use crate::model_io::SavedModel;
use crate::ranking::{rank_all, Query, RankedPrediction, Ranker};
use crate::sparse::SparseMatrix;
use crate::xmlc::{self, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    TestSeen,
    TestNew,
}

impl Partition {
    pub const TEST: [Partition; 2] = [Partition::TestSeen, Partition::TestNew];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::TestSeen => "test_seen",
            Partition::TestNew => "test_new",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "test_seen" | "seen" => Ok(Partition::TestSeen),
            "test_new" | "new" => Ok(Partition::TestNew),
            _ => Err(Error::InvalidParameter(format!("unknown partition `{s}`"))),
        }
    }
}

/// Labels of one partition: the patients with at least one positive, and their rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionLabels {
    pub patients: Vec<u32>,
    pub labels: LabelMatrix,
}

impl PartitionLabels {
    fn from_dataset(ds: &ConsultationDataset, r_min: f64) -> Result<(RatingMatrix, Self)> {
        let ratings = build_ratings(&ds.interactions, &ds.catalog)?;
        let full = threshold_labels(&ratings, r_min)?;
        let patients = full.labelled_patients();
        let labels = LabelMatrix {
            n_doctors: full.n_doctors,
            r_min,
            rows: full.select(&patients),
        };
        Ok((ratings, PartitionLabels { patients, labels }))
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

/// Everything derived from a split that does not depend on the scenario.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: SplitDataset,
    pub encoder: Encoder,
    pub train_ratings: RatingMatrix,
    pub train: PartitionLabels,
    pub test_seen: PartitionLabels,
    pub test_new: PartitionLabels,
    /// Fitted on train label frequencies only.
    pub propensities: Propensities,
}

impl Prepared {
    pub fn new(split: SplitDataset, r_min: f64, eval: &EvalConfig) -> Result<Self> {
        let encoder = Encoder::fit(&split.train)?;
        let (train_ratings, train) = PartitionLabels::from_dataset(&split.train, r_min)?;
        let (_, test_seen) = PartitionLabels::from_dataset(&split.test_seen, r_min)?;
        let (_, test_new) = PartitionLabels::from_dataset(&split.test_new, r_min)?;
        if train.is_empty() {
            return Err(Error::EmptyTrain);
        }
        let propensities = fit_propensities(
            &train.labels.label_frequencies(),
            train.len().max(2),
            eval.propensity_a,
            eval.propensity_b,
        )?;
        Ok(Prepared {
            split,
            encoder,
            train_ratings,
            train,
            test_seen,
            test_new,
            propensities,
        })
    }

    pub fn labels(&self, partition: Partition) -> &PartitionLabels {
        match partition {
            Partition::Train => &self.train,
            Partition::TestSeen => &self.test_seen,
            Partition::TestNew => &self.test_new,
        }
    }

    pub fn encode(&self, scenario: ScenarioConfig) -> Result<ScenarioData> {
        let catalog = &self.split.train.catalog;
        Ok(ScenarioData {
            scenario,
            doctors: self.encoder.doctor_matrix(catalog, scenario),
            train: self.encoder.patient_matrix(catalog, &self.train.patients, scenario)?,
            test_seen: self.encoder.patient_matrix(catalog, &self.test_seen.patients, scenario)?,
            test_new: self.encoder.patient_matrix(catalog, &self.test_new.patients, scenario)?,
        })
    }
}

/// Feature matrices of one scenario, rows aligned with [`Prepared`] partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub scenario: ScenarioConfig,
    pub doctors: SparseMatrix,
    pub train: SparseMatrix,
    pub test_seen: SparseMatrix,
    pub test_new: SparseMatrix,
}

impl ScenarioData {
    pub fn features(&self, partition: Partition) -> &SparseMatrix {
        match partition {
            Partition::Train => &self.train,
            Partition::TestSeen => &self.test_seen,
            Partition::TestNew => &self.test_new,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Method {
    Xml(TrainConfig),
    Popularity,
    Mf(MfConfig),
    HybridMf(HybridConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Xml(_) => "xml",
            Method::Popularity => "popularity",
            Method::Mf(_) => "mf",
            Method::HybridMf(_) => "hybrid_mf",
        }
    }

    /// Whether the method consumes scenario features.
    pub fn uses_features(&self) -> bool {
        matches!(self, Method::Xml(_) | Method::HybridMf(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Xml(c) => c.validate(),
            Method::Popularity => Ok(()),
            Method::Mf(c) => c.validate(),
            Method::HybridMf(c) => c.validate(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Method {
        match self {
            Method::Xml(c) => Method::Xml(TrainConfig { seed, ..c.clone() }),
            Method::Popularity => Method::Popularity,
            Method::Mf(c) => Method::Mf(MfConfig { seed, ..c.clone() }),
            Method::HybridMf(c) => Method::HybridMf(HybridConfig { seed, ..c.clone() }),
        }
    }
}

pub fn fit(method: &Method, prep: &Prepared, data: &ScenarioData) -> Result<SavedModel> {
    Ok(match method {
        Method::Xml(c) => SavedModel::Xml(xmlc::train(&data.train, &data.doctors, &prep.train.labels, c)?),
        Method::Popularity => SavedModel::Popularity(train_popularity(&prep.split.train)),
        Method::Mf(c) => SavedModel::Mf(train_mf(&prep.train_ratings, c)?),
        Method::HybridMf(c) => {
            SavedModel::HybridMf(train_hybrid_mf(&data.train, &data.doctors, &prep.train.labels, c)?)
        }
    })
}

impl Ranker for SavedModel {
    fn rank(&self, query: &Query<'_>, k: usize) -> RankedPrediction {
        match self {
            SavedModel::Xml(m) => m.rank(query, k),
            SavedModel::Popularity(m) => m.rank(query, k),
            SavedModel::Mf(m) => m.rank(query, k),
            SavedModel::HybridMf(m) => m.rank(query, k),
        }
    }
}

/// Top-`k` predictions for each listed patient; `features` rows align with `patients`.
pub fn predict(model: &SavedModel, patients: &[u32], features: &SparseMatrix, k: usize, parallel: bool) -> Result<Vec<RankedPrediction>> {
    if patients.len() != features.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} patients with {} feature rows",
            patients.len(),
            features.n_rows()
        )));
    }
    let queries: Vec<Query<'_>> = patients
        .iter()
        .zip(&features.rows)
        .map(|(&patient, x)| Query { patient, features: x })
        .collect();
    Ok(rank_all(model, &queries, k, parallel))
}

/// Adds the "All" cell group and one group per specialty to `report`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_into(
    report: &mut EvalReport,
    method: &str,
    scenario: &str,
    partition: Partition,
    predictions: &[RankedPrediction],
    prep: &Prepared,
    config: &EvalConfig,
) -> Result<()> {
    let catalog = &prep.split.train.catalog;
    let labels = &prep.labels(partition).labels.rows;
    let all = evaluate(predictions, labels, &prep.propensities, config, None)?;
    report.push(method, scenario, partition.name(), "All", &all);
    for (s, name) in catalog.specialties.iter().enumerate() {
        let e = evaluate(predictions, labels, &prep.propensities, config, Some((s as u32, catalog)))?;
        report.push(method, scenario, partition.name(), name, &e);
    }
    Ok(())
}

pub fn diversity(prep: &Prepared, partition: Partition, predictions: &[RankedPrediction]) -> DiversityReport {
    diversity_report(predictions, &prep.labels(partition).labels.rows, &prep.split.train.catalog)
}

/// Scenario label used in reports for methods that ignore features.
pub const NO_SCENARIO: &str = "none";

/// Stores predictions per method, scenario and partition.
#[derive(Clone, Debug, Default)]
pub struct GridOutput {
    pub report: EvalReport,
    pub predictions: Vec<(String, String, Partition, Vec<RankedPrediction>)>,
}

impl GridOutput {
    pub fn predictions_for(&self, method: &str, scenario: &str, partition: Partition) -> Option<&[RankedPrediction]> {
        self.predictions
            .iter()
            .find(|(m, s, p, _)| m == method && s == scenario && *p == partition)
            .map(|(_, _, _, v)| v.as_slice())
    }
}

/// Fits every method on every scenario (once for feature-free methods) and evaluates both test partitions.
pub fn run_grid(
    prep: &Prepared,
    scenarios: &[ScenarioConfig],
    methods: &[Method],
    config: &EvalConfig,
    top_b: usize,
    parallel: bool,
) -> Result<GridOutput> {
    let mut out = GridOutput {
        report: EvalReport::new(),
        predictions: Vec::new(),
    };
    let data: Vec<ScenarioData> = scenarios.iter().map(|&s| prep.encode(s)).collect::<Result<_>>()?;
    for method in methods {
        let runs: Vec<(&ScenarioData, String)> = if method.uses_features() {
            data.iter().map(|d| (d, d.scenario.scenario.to_string())).collect()
        } else {
            data.first().map(|d| (d, NO_SCENARIO.to_string())).into_iter().collect()
        };
        for (d, scenario_name) in runs {
            let model = fit(method, prep, d)?;
            for partition in Partition::TEST {
                let preds = predict(&model, &prep.labels(partition).patients, d.features(partition), top_b, parallel)?;
                evaluate_into(&mut out.report, method.name(), &scenario_name, partition, &preds, prep, config)?;
                out.predictions.push((method.name().to_string(), scenario_name.clone(), partition, preds));
            }
        }
    }
    Ok(out)
}
