use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use referral::dataset::{
    apply_split_manifest, load_dataset, temporal_split, write_dataset, write_interactions, Catalog, ConsultationDataset,
    DatasetFiles, SplitManifest, SplitSummary,
};
use referral::experiment::{fit, predict, Method, Partition, Prepared, ScenarioData};
use referral::features::ScenarioConfig;
use referral::metrics::{diversity_report, evaluate, fit_propensities, EvalConfig, EvalReport, Propensities};
use referral::model_io::{load_model, save_model};
use referral::ranking::{read_predictions, write_predictions, RankedPrediction};
use referral::sparse::{read_ids, write_ids, SparseMatrix};
use referral::synthgen::{generate, GeneratorConfig};

pub const SPLIT_FILE: &str = "split.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const SPACE_FILE: &str = "feature_space.json";
pub const DOCTORS: &str = "doctors";

const PARTITIONS: [Partition; 3] = [Partition::Train, Partition::TestSeen, Partition::TestNew];

pub fn features_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.txt"))
}

pub fn ids_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.ids"))
}

pub fn labels_file(dir: &Path, partition: Partition) -> std::path::PathBuf {
    dir.join(format!("labels_{}.txt", partition.name()))
}

pub fn generate_stage(config: &GeneratorConfig, seed: u64, out: &Path) -> Result<ConsultationDataset> {
    let ds = generate(config, seed)?;
    write_dataset(&ds, out)?;
    log::info!(
        "stage=generate patients={} doctors={} interactions={}",
        ds.n_patients(),
        ds.n_doctors(),
        ds.interactions.len()
    );
    Ok(ds)
}

pub fn load_data(dir: &Path) -> Result<ConsultationDataset> {
    load_dataset(&DatasetFiles::in_dir(dir)).with_context(|| format!("loading dataset from {}", dir.display()))
}

pub fn split_stage(data: &Path, test_fraction: f64, new_fraction: f64, seed: u64, out: &Path) -> Result<SplitSummary> {
    let ds = load_data(data)?;
    let split = temporal_split(&ds, test_fraction, new_fraction, seed)?;
    fs::create_dir_all(out)?;
    split.manifest(test_fraction, new_fraction, seed).save(&out.join(SPLIT_FILE))?;
    for (name, part) in [("train", &split.train), ("test_seen", &split.test_seen), ("test_new", &split.test_new)] {
        write_interactions(part, &out.join(format!("{name}.csv")))?;
    }
    let summary = split.summary();
    fs::write(
        out.join(SUMMARY_FILE),
        format!("{summary}test fraction {:.4}\n", summary.test_fraction()),
    )?;
    log::info!(
        "stage=split train={} test_seen={} test_new={}",
        summary.train.interactions,
        summary.test_seen.interactions,
        summary.test_new.interactions
    );
    Ok(summary)
}

pub fn load_prepared(data: &Path, split: &Path, r_min: f64, eval: &EvalConfig) -> Result<Prepared> {
    let ds = load_data(data)?;
    let manifest = SplitManifest::load(split).with_context(|| format!("loading split {}", split.display()))?;
    let split = apply_split_manifest(&ds, &manifest)?;
    Ok(Prepared::new(split, r_min, eval)?)
}

pub fn write_labels(path: &Path, patients: &[u32], rows: &[Vec<u32>], catalog: &Catalog) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (&p, row) in patients.iter().zip(rows) {
        write!(w, "{}", catalog.patients[p as usize].id)?;
        for &d in row {
            write!(w, " {}", catalog.doctors[d as usize].id)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `patient_id doctor_id ...` lines.
pub fn read_labels(path: &Path, catalog: &Catalog) -> Result<Vec<(u32, Vec<u32>)>> {
    let reader = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut toks = line.split_whitespace();
        let Some(pid) = toks.next() else { continue };
        let Some(p) = catalog.patient_by_id(pid) else {
            bail!("{}:{}: unknown patient `{pid}`", path.display(), i + 1);
        };
        let mut row = Vec::new();
        for d in toks {
            match catalog.doctor_by_id(d) {
                Some(d) => row.push(d),
                None => bail!("{}:{}: unknown doctor `{d}`", path.display(), i + 1),
            }
        }
        row.sort_unstable();
        row.dedup();
        out.push((p, row));
    }
    Ok(out)
}

fn patient_ids(catalog: &Catalog, patients: &[u32]) -> Vec<String> {
    patients.iter().map(|&p| catalog.patients[p as usize].id.clone()).collect()
}

pub fn encode_stage(prep: &Prepared, scenario: ScenarioConfig, out: &Path) -> Result<()> {
    let data = prep.encode(scenario)?;
    let catalog = &prep.split.train.catalog;
    fs::create_dir_all(out)?;
    fs::write(out.join(SCENARIO_FILE), serde_json::to_string_pretty(&scenario)?)?;
    fs::write(out.join(SPACE_FILE), serde_json::to_string_pretty(&prep.encoder.space)?)?;
    data.doctors.write_text(&features_file(out, DOCTORS))?;
    let doctor_ids: Vec<String> = catalog.doctors.iter().map(|d| d.id.clone()).collect();
    write_ids(&ids_file(out, DOCTORS), &doctor_ids)?;
    for part in PARTITIONS {
        let labels = prep.labels(part);
        data.features(part).write_text(&features_file(out, part.name()))?;
        write_ids(&ids_file(out, part.name()), &patient_ids(catalog, &labels.patients))?;
        write_labels(&labels_file(out, part), &labels.patients, &labels.labels.rows, catalog)?;
    }
    log::info!(
        "stage=encode scenario={} dim={} nnz_train={} nnz_doctors={}",
        scenario.scenario,
        prep.encoder.dim(),
        data.train.nnz(),
        data.doctors.nnz()
    );
    Ok(())
}

fn read_scenario_data(prep: &Prepared, dir: &Path) -> Result<ScenarioData> {
    let scenario: ScenarioConfig = serde_json::from_str(&fs::read_to_string(dir.join(SCENARIO_FILE))?)?;
    let catalog = &prep.split.train.catalog;
    let mut mats = Vec::new();
    for part in PARTITIONS {
        let ids = read_ids(&ids_file(dir, part.name()))?;
        if ids != patient_ids(catalog, &prep.labels(part).patients) {
            bail!("{} patients in {} do not match the split", part.name(), dir.display());
        }
        mats.push(SparseMatrix::read_text(&features_file(dir, part.name()))?);
    }
    let doctors = SparseMatrix::read_text(&features_file(dir, DOCTORS))?;
    let test_new = mats.pop().expect("three partitions");
    let test_seen = mats.pop().expect("three partitions");
    let train = mats.pop().expect("three partitions");
    Ok(ScenarioData {
        scenario,
        doctors,
        train,
        test_seen,
        test_new,
    })
}

pub fn train_stage(prep: &Prepared, features: Option<&Path>, method: &Method, seed: u64, out: &Path) -> Result<()> {
    let data = match features {
        Some(dir) => read_scenario_data(prep, dir)?,
        None if method.uses_features() => bail!("method `{}` needs encoded features", method.name()),
        None => prep.encode(ScenarioConfig::of(referral::features::Scenario::S1))?,
    };
    let start = std::time::Instant::now();
    let model = fit(method, prep, &data)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_model(out, &model, seed)?;
    log::info!(
        "stage=train method={} scenario={} secs={:.3}",
        method.name(),
        data.scenario.scenario,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn predict_stage(
    catalog: &Catalog,
    features: &Path,
    model: &Path,
    partition: Partition,
    top_b: usize,
    parallel: bool,
    out: &Path,
) -> Result<Vec<RankedPrediction>> {
    let (_, model) = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    let ids = read_ids(&ids_file(features, partition.name()))?;
    let patients = ids
        .iter()
        .map(|id| catalog.patient_by_id(id).with_context(|| format!("unknown patient `{id}`")))
        .collect::<Result<Vec<u32>>>()?;
    let x = SparseMatrix::read_text(&features_file(features, partition.name()))?;
    let preds = predict(&model, &patients, &x, top_b, parallel)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_predictions(out, &preds, catalog)?;
    log::info!("stage=predict partition={} patients={}", partition.name(), preds.len());
    Ok(preds)
}

pub fn train_propensities(labels: &[(u32, Vec<u32>)], n_doctors: usize, eval: &EvalConfig) -> Result<Propensities> {
    let mut freq = vec![0u32; n_doctors];
    let mut rows = 0;
    for (_, row) in labels {
        if !row.is_empty() {
            rows += 1;
        }
        for &d in row {
            freq[d as usize] += 1;
        }
    }
    Ok(fit_propensities(&freq, rows.max(2), eval.propensity_a, eval.propensity_b)?)
}

/// Evaluation inputs aligned to the label file order.
pub struct Aligned {
    pub predictions: Vec<RankedPrediction>,
    pub relevant: Vec<Vec<u32>>,
}

pub fn align(predictions: Vec<RankedPrediction>, labels: Vec<(u32, Vec<u32>)>) -> Aligned {
    let mut by_patient: std::collections::HashMap<u32, RankedPrediction> =
        predictions.into_iter().map(|p| (p.patient, p)).collect();
    let mut out = Aligned {
        predictions: Vec::with_capacity(labels.len()),
        relevant: Vec::with_capacity(labels.len()),
    };
    for (p, row) in labels {
        out.predictions.push(by_patient.remove(&p).unwrap_or_else(|| RankedPrediction::empty(p)));
        out.relevant.push(row);
    }
    out
}

/// Adds the "All" group and one group per specialty.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_groups(
    report: &mut EvalReport,
    method: &str,
    scenario: &str,
    partition: &str,
    aligned: &Aligned,
    propensities: &Propensities,
    eval: &EvalConfig,
    catalog: &Catalog,
) -> Result<()> {
    let all = evaluate(&aligned.predictions, &aligned.relevant, propensities, eval, None)?;
    report.push(method, scenario, partition, "All", &all);
    for (s, name) in catalog.specialties.iter().enumerate() {
        let e = evaluate(&aligned.predictions, &aligned.relevant, propensities, eval, Some((s as u32, catalog)))?;
        report.push(method, scenario, partition, name, &e);
    }
    Ok(())
}

pub fn read_prediction_file(path: &Path, catalog: &Catalog) -> Result<Vec<RankedPrediction>> {
    read_predictions(path, |s| catalog.patient_by_id(s), |s| catalog.doctor_by_id(s))
        .with_context(|| format!("reading predictions {}", path.display()))
}

pub fn write_diversity(dir: &Path, stem: &str, aligned: &Aligned, catalog: &Catalog) -> Result<()> {
    fs::create_dir_all(dir)?;
    let report = diversity_report(&aligned.predictions, &aligned.relevant, catalog);
    report.write_doctor_csv(fs::File::create(dir.join(format!("{stem}_doctors.csv")))?, catalog)?;
    report.write_histogram_csv(fs::File::create(dir.join(format!("{stem}_specialties.csv")))?)?;
    log::info!(
        "diversity {stem}: prediction gini {:.3}, label gini {:.3}, distinct predicted {}",
        report.prediction_gini(),
        report.label_gini(),
        report.distinct_predicted()
    );
    Ok(())
}
