//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every entry point takes and returns JSON strings so the page needs no generated type glue.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use referral::dataset::{temporal_split, SplitSummary};
use referral::experiment::{run_grid, Method, Prepared, NO_SCENARIO};
use referral::features::{HospitalEncoding, Scenario, ScenarioConfig};
use referral::metrics::{fit_propensities, gini, EvalConfig, Metric};
use referral::synthgen::{generate, GeneratorConfig};
use referral::xmlc::TrainConfig;

#[derive(Serialize)]
pub struct DatasetView {
    pub patients: usize,
    pub doctors: usize,
    pub interactions: usize,
    /// Visit counts per doctor, most visited first.
    pub rank_frequency: Vec<u32>,
    pub gini: f64,
    pub split: SplitSummary,
}

pub fn dataset_view(config: &GeneratorConfig, seed: u64) -> Result<DatasetView, String> {
    let ds = generate(config, seed).map_err(|e| e.to_string())?;
    let mut counts = vec![0u32; ds.n_doctors()];
    for it in &ds.interactions {
        counts[it.doctor as usize] += 1;
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let g = gini(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let split = temporal_split(&ds, 0.3, 0.15, seed).map_err(|e| e.to_string())?;
    Ok(DatasetView {
        patients: ds.n_patients(),
        doctors: ds.n_doctors(),
        interactions: ds.interactions.len(),
        rank_frequency: counts,
        gini: g,
        split: split.summary(),
    })
}

/// `(label frequency, propensity)` pairs for frequencies `0..=max_frequency`.
pub fn propensity_points(a: f64, b: f64, n_points: usize, max_frequency: u32) -> Result<Vec<(u32, f64)>, String> {
    let freqs: Vec<u32> = (0..=max_frequency).collect();
    let p = fit_propensities(&freqs, n_points, a, b).map_err(|e| e.to_string())?;
    Ok(freqs.into_iter().zip(p.values).collect())
}

#[derive(Deserialize)]
#[serde(default)]
pub struct ExperimentRequest {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub scenario: String,
    pub distances: bool,
    pub epochs: usize,
}

impl Default for ExperimentRequest {
    fn default() -> Self {
        ExperimentRequest {
            generator: GeneratorConfig {
                n_patients: 600,
                n_doctors: 80,
                n_hospitals: 8,
                ..GeneratorConfig::default()
            },
            seed: 1,
            scenario: "S1".into(),
            distances: false,
            epochs: 5,
        }
    }
}

#[derive(Serialize)]
pub struct ScoreRow {
    pub method: String,
    pub scenario: String,
    pub partition: String,
    pub metric: String,
    pub k: usize,
    pub value: Option<f64>,
}

/// Trains popularity and the tree model on one scenario and returns the "All" cells.
pub fn experiment(req: &ExperimentRequest) -> Result<Vec<ScoreRow>, String> {
    let scenario: Scenario = req.scenario.parse().map_err(|e: referral::Error| e.to_string())?;
    let encoding = req.distances.then_some(HospitalEncoding::Distances);
    let sc = ScenarioConfig::new(scenario, encoding).map_err(|e| e.to_string())?;
    let ds = generate(&req.generator, req.seed).map_err(|e| e.to_string())?;
    let split = temporal_split(&ds, 0.3, 0.15, req.seed).map_err(|e| e.to_string())?;
    let eval = EvalConfig { ks: vec![1, 3, 5], ..EvalConfig::default() };
    let prep = Prepared::new(split, 0.0, &eval).map_err(|e| e.to_string())?;
    let xml = TrainConfig {
        epochs: req.epochs,
        tree_epochs: req.epochs,
        seed: req.seed,
        ..TrainConfig::default()
    };
    let methods = [Method::Popularity, Method::Xml(xml)];
    let grid = run_grid(&prep, &[sc], &methods, &eval, 10, false).map_err(|e| e.to_string())?;
    Ok(grid
        .report
        .rows
        .into_iter()
        .filter(|r| r.specialty == "All" && matches!(r.metric, Metric::Precision | Metric::Ndcg | Metric::PsPrecision))
        .map(|r| ScoreRow {
            scenario: if r.scenario == NO_SCENARIO { "-".into() } else { r.scenario },
            method: r.method,
            partition: r.partition,
            metric: r.metric.name().into(),
            k: r.k,
            value: r.value,
        })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

fn parse<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, String> {
    if json.trim().is_empty() {
        serde_json::from_str("{}").map_err(|e| e.to_string())
    } else {
        serde_json::from_str(json).map_err(|e| e.to_string())
    }
}

/// Generator config as JSON (missing keys take defaults).
#[wasm_bindgen(js_name = generateDataset)]
pub fn generate_dataset(config_json: &str, seed: u32) -> Result<String, JsValue> {
    to_js(parse::<GeneratorConfig>(config_json).and_then(|c| dataset_view(&c, seed as u64)))
}

#[wasm_bindgen(js_name = propensityCurve)]
pub fn propensity_curve(a: f64, b: f64, n_points: u32, max_frequency: u32) -> Result<String, JsValue> {
    to_js(propensity_points(a, b, n_points as usize, max_frequency))
}

#[wasm_bindgen(js_name = runExperiment)]
pub fn run_experiment(request_json: &str) -> Result<String, JsValue> {
    to_js(parse::<ExperimentRequest>(request_json).and_then(|r| experiment(&r)))
}
