use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use sha2::{Digest, Sha256};

use referral::dataset::DatasetFiles;
use referral::experiment::{Method, Partition, Prepared, NO_SCENARIO};
use referral::features::ScenarioConfig;
use referral::metrics::EvalReport;

use crate::manifest::{scenario_label, DatasetSource, Manifest};
use crate::report::report_stage;
use crate::stages::{self, labels_file, SPLIT_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    Generate,
    Split,
    Encode,
    Train,
    Predict,
    Evaluate,
    Report,
}

const STAMPS: &str = ".stamps";

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn generated(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split")
    }
    pub fn features(&self, scenario: &str) -> PathBuf {
        self.root.join("features").join(scenario)
    }
    pub fn model(&self, method: &str, scenario: &str) -> PathBuf {
        self.root.join("models").join(format!("{method}_{scenario}.bin"))
    }
    pub fn predictions(&self, method: &str, scenario: &str, partition: Partition) -> PathBuf {
        self.root.join("predictions").join(format!("{method}_{scenario}_{}.txt", partition.name()))
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json(value: &impl serde::Serialize) -> Vec<u8> {
    serde_json::to_vec(value).expect("config serializes")
}

fn dataset_hash(dir: &Path) -> Result<Vec<u8>> {
    let files = DatasetFiles::in_dir(dir);
    let mut h = Sha256::new();
    for f in [&files.interactions, &files.patients, &files.doctors, &files.hospitals] {
        h.update(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(h.finalize().to_vec())
}

/// One feature-based run per scenario; feature-free methods run once on the first scenario's features.
struct Run {
    method: Method,
    label: String,
    features: String,
}

fn runs(manifest: &Manifest, scenarios: &[ScenarioConfig]) -> Vec<Run> {
    let mut out = Vec::new();
    for m in manifest.models.iter().map(|m| m.with_seed(manifest.seed)) {
        if m.uses_features() {
            for s in scenarios {
                out.push(Run { method: m.clone(), label: scenario_label(s), features: scenario_label(s) });
            }
        } else {
            out.push(Run {
                method: m.clone(),
                label: NO_SCENARIO.to_string(),
                features: scenario_label(&scenarios[0]),
            });
        }
    }
    out
}

struct Runner {
    stamps: PathBuf,
    through: Stage,
    cached: usize,
    executed: usize,
}

impl Runner {
    /// Runs `work` unless the stamp already holds `key` and its outputs exist.
    fn step(&mut self, name: &str, key: &str, outputs: &[PathBuf], work: impl FnOnce() -> Result<()>) -> Result<()> {
        let stamp = self.stamps.join(name);
        let fresh = fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == key) && outputs.iter().all(|p| p.exists());
        if fresh {
            log::info!("stage={name} cached");
            self.cached += 1;
            return Ok(());
        }
        let _ = fs::remove_file(&stamp);
        work().with_context(|| format!("stage {name}"))?;
        fs::create_dir_all(stamp.parent().expect("stamp dir"))?;
        fs::write(&stamp, key)?;
        self.executed += 1;
        Ok(())
    }

    fn wants(&self, stage: Stage) -> bool {
        stage <= self.through
    }
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: usize,
    pub cached: usize,
}

/// Runs the stages up to and including `through`. The manifest must already be validated.
pub fn run(manifest: &Manifest, through: Stage, parallel: bool) -> Result<RunSummary> {
    let scenarios = manifest.scenario_configs()?;
    let layout = Layout { root: manifest.output_dir.clone() };
    let mut r = Runner {
        stamps: layout.root.join(STAMPS),
        through,
        cached: 0,
        executed: 0,
    };
    fs::create_dir_all(&layout.root)?;
    let seed = manifest.seed;

    let (data_dir, data_key) = match &manifest.dataset {
        DatasetSource::Generator(g) => {
            let dir = layout.generated();
            let k = key(&[b"generate", &json(g), &seed.to_le_bytes()]);
            let files = DatasetFiles::in_dir(&dir);
            r.step("generate", &k, &[files.interactions.clone(), files.hospitals.clone()], || {
                stages::generate_stage(g, seed, &dir).map(|_| ())
            })?;
            (dir, k)
        }
        DatasetSource::Path(p) => (p.clone(), key(&[b"dataset", &dataset_hash(p)?])),
    };
    if !r.wants(Stage::Split) {
        return Ok(r.summary());
    }

    let split_dir = layout.split();
    let split_file = split_dir.join(SPLIT_FILE);
    let split_key = key(&[b"split", data_key.as_bytes(), &json(&manifest.split), &seed.to_le_bytes()]);
    r.step("split", &split_key, std::slice::from_ref(&split_file), || {
        let s = stages::split_stage(&data_dir, manifest.split.test_fraction, manifest.split.new_patient_fraction, seed, &split_dir)?;
        print!("{s}");
        Ok(())
    })?;
    if !r.wants(Stage::Encode) {
        return Ok(r.summary());
    }

    let mut prep: Option<Prepared> = None;
    let load = |prep: &mut Option<Prepared>| -> Result<()> {
        if prep.is_none() {
            *prep = Some(stages::load_prepared(&data_dir, &split_file, manifest.r_min, &manifest.eval)?);
        }
        Ok(())
    };

    let mut encode_keys = Vec::new();
    for s in &scenarios {
        let label = scenario_label(s);
        let dir = layout.features(&label);
        let k = key(&[b"encode", split_key.as_bytes(), &json(s), &manifest.r_min.to_le_bytes()]);
        r.step(&format!("encode_{label}"), &k, &[labels_file(&dir, Partition::TestNew)], || {
            load(&mut prep)?;
            stages::encode_stage(prep.as_ref().expect("loaded"), *s, &dir)
        })?;
        encode_keys.push((label, k));
    }
    let encode_key = |label: &str| encode_keys.iter().find(|(l, _)| l == label).map(|(_, k)| k.clone()).expect("encoded");
    if !r.wants(Stage::Train) {
        return Ok(r.summary());
    }

    let runs = runs(manifest, &scenarios);
    let mut train_keys = Vec::new();
    for run in &runs {
        let name = run.method.name();
        let model = layout.model(name, &run.label);
        let features = layout.features(&run.features);
        let k = key(&[b"train", encode_key(&run.features).as_bytes(), &json(&run.method), &seed.to_le_bytes()]);
        r.step(&format!("train_{name}_{}", run.label), &k, std::slice::from_ref(&model), || {
            load(&mut prep)?;
            stages::train_stage(prep.as_ref().expect("loaded"), Some(&features), &run.method, seed, &model)
        })?;
        train_keys.push(k);
    }
    if !r.wants(Stage::Predict) {
        return Ok(r.summary());
    }

    let catalog = stages::load_data(&data_dir)?.catalog;
    let mut predict_keys = Vec::new();
    for (run, tk) in runs.iter().zip(&train_keys) {
        let name = run.method.name();
        let model = layout.model(name, &run.label);
        let features = layout.features(&run.features);
        let outputs: Vec<PathBuf> = Partition::TEST.iter().map(|&p| layout.predictions(name, &run.label, p)).collect();
        let k = key(&[b"predict", tk.as_bytes(), &(manifest.top_b as u64).to_le_bytes()]);
        r.step(&format!("predict_{name}_{}", run.label), &k, &outputs, || {
            for (&p, out) in Partition::TEST.iter().zip(&outputs) {
                stages::predict_stage(&catalog, &features, &model, p, manifest.top_b, parallel, out)?;
            }
            Ok(())
        })?;
        predict_keys.push(k);
    }
    if !r.wants(Stage::Evaluate) {
        return Ok(r.summary());
    }

    let eval_dir = layout.evaluation();
    let report_csv = eval_dir.join("report.csv");
    let mut eval_parts: Vec<&[u8]> = vec![b"evaluate"];
    let ej = json(&manifest.eval);
    eval_parts.push(&ej);
    for k in &predict_keys {
        eval_parts.push(k.as_bytes());
    }
    let eval_key = key(&eval_parts);
    r.step("evaluate", &eval_key, std::slice::from_ref(&report_csv), || {
        let mut report = EvalReport::new();
        for run in &runs {
            let name = run.method.name();
            let features = layout.features(&run.features);
            let train_labels = stages::read_labels(&labels_file(&features, Partition::Train), &catalog)?;
            let props = stages::train_propensities(&train_labels, catalog.n_doctors(), &manifest.eval)?;
            for p in Partition::TEST {
                let preds = stages::read_prediction_file(&layout.predictions(name, &run.label, p), &catalog)?;
                let labels = stages::read_labels(&labels_file(&features, p), &catalog)?;
                let aligned = stages::align(preds, labels);
                stages::evaluate_groups(&mut report, name, &run.label, p.name(), &aligned, &props, &manifest.eval, &catalog)?;
                stages::write_diversity(&eval_dir.join("diversity"), &format!("{name}_{}_{}", run.label, p.name()), &aligned, &catalog)?;
            }
        }
        report.save_csv(&report_csv)?;
        report.save_json(&eval_dir.join("report.json"))?;
        log::info!("stage=evaluate cells={}", report.rows.len());
        Ok(())
    })?;
    if !r.wants(Stage::Report) {
        return Ok(r.summary());
    }

    let report_dir = layout.report();
    let k = key(&[b"report", eval_key.as_bytes()]);
    r.step("report", &k, &[report_dir.join(crate::report::TABLES_FILE)], || {
        report_stage(&report_csv, &report_dir).map(|_| ())
    })?;
    Ok(r.summary())
}

impl Runner {
    fn summary(&self) -> RunSummary {
        log::info!("pipeline done: {} stages run, {} cached", self.executed, self.cached);
        RunSummary { executed: self.executed, cached: self.cached }
    }
}
