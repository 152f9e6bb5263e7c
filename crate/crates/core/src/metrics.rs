//! Ranking metrics, propensity-scored variants, specialty evaluation and
//! prediction diversity.
//!
//! Relevant-label slices are expected sorted ascending, as stored in
//! [`LabelMatrix`](crate::labels::LabelMatrix) rows.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Catalog;
use crate::error::{Error, Result};
use crate::ranking::{filter_by_specialty, RankedPrediction};

fn is_relevant(relevant: &[u32], label: u32) -> bool {
    relevant.binary_search(&label).is_ok()
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

/// `|top-k ∩ relevant| / k`.
pub fn precision_at_k(prediction: &[u32], relevant: &[u32], k: usize) -> f64 {
    let hits = prediction.iter().take(k).filter(|&&l| is_relevant(relevant, l)).count();
    hits as f64 / k as f64
}

/// `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k(prediction: &[u32], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = prediction.iter().take(k).filter(|&&l| is_relevant(relevant, l)).count();
    hits as f64 / relevant.len() as f64
}

pub fn ndcg_at_k(prediction: &[u32], relevant: &[u32], k: usize) -> f64 {
    let dcg: f64 = prediction
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| is_relevant(relevant, l))
        .fold(0.0, |acc, (i, _)| acc + discount(i));
    let ideal: f64 = (0..k.min(relevant.len())).map(discount).sum();
    if ideal > 0.0 {
        dcg / ideal
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Propensities {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub values: Vec<f64>,
}

impl Propensities {
    /// All labels equally likely to be observed.
    pub fn uniform(n_labels: usize) -> Self {
        Propensities {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            values: vec![1.0; n_labels],
        }
    }

    pub fn inverse(&self, label: u32) -> f64 {
        1.0 / self.values[label as usize]
    }
}

/// `p_l = 1 / (1 + C (n_l + B)^-A)` with `C = (ln N - 1)(B + 1)^A`, clamped to at most 1.
pub fn fit_propensities(frequencies: &[u32], n_points: usize, a: f64, b: f64) -> Result<Propensities> {
    if n_points < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 points, got {n_points}")));
    }
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter("propensity A and B must be positive".into()));
    }
    let c = ((n_points as f64).ln() - 1.0) * (b + 1.0).powf(a);
    let values = frequencies
        .iter()
        .map(|&n| (1.0 / (1.0 + c * (-a * (n as f64 + b).ln()).exp())).min(1.0))
        .collect();
    Ok(Propensities { a, b, c, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PsKind {
    Precision,
    Ndcg,
}

/// Propensity-weighted precision or nDCG, divided by the best value reachable for `relevant` at `k`.
pub fn ps_metric_at_k(
    prediction: &[u32],
    relevant: &[u32],
    propensities: &Propensities,
    k: usize,
    kind: PsKind,
) -> f64 {
    let mut best: Vec<f64> = relevant.iter().map(|&l| propensities.inverse(l)).collect();
    best.sort_by(|x, y| y.total_cmp(x));
    best.truncate(k);
    if best.is_empty() {
        return 0.0;
    }
    let hits = prediction
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| is_relevant(relevant, l));
    let value = match kind {
        PsKind::Precision => {
            let got = hits.fold(0.0, |acc, (_, &l)| acc + propensities.inverse(l)) / k as f64;
            got / (best.iter().sum::<f64>() / best.len() as f64)
        }
        PsKind::Ndcg => {
            let got = hits.fold(0.0, |acc, (i, &l)| acc + propensities.inverse(l) * discount(i));
            got / best.iter().enumerate().map(|(i, w)| w * discount(i)).sum::<f64>()
        }
    };
    value.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "P")]
    Precision,
    #[serde(rename = "nDCG")]
    Ndcg,
    Recall,
    #[serde(rename = "PSP")]
    PsPrecision,
    #[serde(rename = "PSnDCG")]
    PsNdcg,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Precision, Metric::Ndcg, Metric::Recall, Metric::PsPrecision, Metric::PsNdcg];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "P",
            Metric::Ndcg => "nDCG",
            Metric::Recall => "Recall",
            Metric::PsPrecision => "PSP",
            Metric::PsNdcg => "PSnDCG",
        }
    }

    pub fn compute(self, prediction: &[u32], relevant: &[u32], propensities: &Propensities, k: usize) -> f64 {
        match self {
            Metric::Precision => precision_at_k(prediction, relevant, k),
            Metric::Ndcg => ndcg_at_k(prediction, relevant, k),
            Metric::Recall => recall_at_k(prediction, relevant, k),
            Metric::PsPrecision => ps_metric_at_k(prediction, relevant, propensities, k, PsKind::Precision),
            Metric::PsNdcg => ps_metric_at_k(prediction, relevant, propensities, k, PsKind::Ndcg),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub min_predictions_per_specialty: usize,
    pub propensity_a: f64,
    pub propensity_b: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 3, 5, 10],
            min_predictions_per_specialty: 3,
            propensity_a: 0.55,
            propensity_b: 1.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidParameter("K values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub metric: Metric,
    pub k: usize,
    /// `None` when no patient survives the filters.
    pub value: Option<f64>,
    pub n_patients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `None` for the unfiltered evaluation.
    pub specialty: Option<u32>,
    pub cells: Vec<Cell>,
    pub n_patients: usize,
    pub dropped_no_positives: usize,
    pub dropped_few_predictions: usize,
}

impl Evaluation {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.k == k)
            .and_then(|c| c.value)
    }
}

/// Macro-averaged metrics over rows with at least one relevant label.
///
/// With `specialty`, predictions and labels are restricted to that
/// specialty's doctors and rows with fewer than
/// `min_predictions_per_specialty` remaining predictions are dropped.
pub fn evaluate(
    predictions: &[RankedPrediction],
    relevant: &[Vec<u32>],
    propensities: &Propensities,
    config: &EvalConfig,
    specialty: Option<(u32, &Catalog)>,
) -> Result<Evaluation> {
    config.validate()?;
    if predictions.len() != relevant.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} label rows",
            predictions.len(),
            relevant.len()
        )));
    }
    let mut rows: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    let (mut no_pos, mut few) = (0, 0);
    for (pred, rel) in predictions.iter().zip(relevant) {
        let (pred, rel) = match specialty {
            None => (pred.doctors(), rel.clone()),
            Some((s, catalog)) => {
                let rel: Vec<u32> = rel
                    .iter()
                    .copied()
                    .filter(|&d| catalog.doctors[d as usize].has_specialty(s))
                    .collect();
                (filter_by_specialty(pred, s, catalog)?.doctors(), rel)
            }
        };
        if rel.is_empty() {
            no_pos += 1;
            continue;
        }
        if specialty.is_some() && pred.len() < config.min_predictions_per_specialty {
            few += 1;
            continue;
        }
        rows.push((pred, rel));
    }
    let mut cells = Vec::new();
    for metric in Metric::ALL {
        for &k in &config.ks {
            let total: f64 = rows
                .iter()
                .map(|(p, r)| metric.compute(p, r, propensities, k))
                .sum();
            cells.push(Cell {
                metric,
                k,
                value: (!rows.is_empty()).then(|| total / rows.len() as f64),
                n_patients: rows.len(),
            });
        }
    }
    Ok(Evaluation {
        specialty: specialty.map(|(s, _)| s),
        cells,
        n_patients: rows.len(),
        dropped_no_positives: no_pos,
        dropped_few_predictions: few,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoctorDiversity {
    pub doctor: u32,
    pub label_count: usize,
    pub prediction_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_doctor: Vec<DoctorDiversity>,
    /// Distinct specialties among each patient's predictions.
    pub specialties_per_patient: Vec<usize>,
    /// `histogram[j]` patients have predictions spanning `j` specialties.
    pub histogram: Vec<usize>,
}

impl DiversityReport {
    pub fn prediction_gini(&self) -> f64 {
        gini(&self.per_doctor.iter().map(|d| d.prediction_count as f64).collect::<Vec<_>>())
    }

    pub fn label_gini(&self) -> f64 {
        gini(&self.per_doctor.iter().map(|d| d.label_count as f64).collect::<Vec<_>>())
    }

    pub fn distinct_predicted(&self) -> usize {
        self.per_doctor.iter().filter(|d| d.prediction_count > 0).count()
    }
}

pub fn diversity_report(predictions: &[RankedPrediction], relevant: &[Vec<u32>], catalog: &Catalog) -> DiversityReport {
    let n = catalog.n_doctors();
    let mut labels = vec![0usize; n];
    let mut preds = vec![0usize; n];
    for row in relevant {
        for &d in row {
            labels[d as usize] += 1;
        }
    }
    let mut specialties_per_patient = Vec::with_capacity(predictions.len());
    let mut histogram = vec![0usize; catalog.specialties.len() + 1];
    for pred in predictions {
        let mut seen = vec![false; catalog.specialties.len()];
        for &(d, _) in &pred.entries {
            preds[d as usize] += 1;
            for &s in &catalog.doctors[d as usize].specialties {
                seen[s as usize] = true;
            }
        }
        let distinct = seen.iter().filter(|&&b| b).count();
        histogram[distinct] += 1;
        specialties_per_patient.push(distinct);
    }
    DiversityReport {
        per_doctor: (0..n)
            .map(|d| DoctorDiversity {
                doctor: d as u32,
                label_count: labels[d],
                prediction_count: preds[d],
            })
            .collect(),
        specialties_per_patient,
        histogram,
    }
}

/// Gini coefficient of non-negative values; 0 for empty or all-zero input.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    (2.0 * weighted) / (n as f64 * total) - (n as f64 + 1.0) / n as f64
}

/// One cell of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub scenario: String,
    pub partition: String,
    pub specialty: String,
    pub metric: Metric,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: Option<f64>,
    pub n_patients: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// How propensity-scored values are normalized.
    pub ps_normalization: String,
    pub rows: Vec<ReportRow>,
}

pub const PS_NORMALIZATION: &str = "per-row best achievable at K";

impl EvalReport {
    pub fn new() -> Self {
        EvalReport {
            ps_normalization: PS_NORMALIZATION.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: &str, scenario: &str, partition: &str, specialty: &str, eval: &Evaluation) {
        for c in &eval.cells {
            self.rows.push(ReportRow {
                method: method.to_string(),
                scenario: scenario.to_string(),
                partition: partition.to_string(),
                specialty: specialty.to_string(),
                metric: c.metric,
                k: c.k,
                value: c.value,
                n_patients: c.n_patients,
            });
        }
    }

    pub fn find(&self, method: &str, scenario: &str, partition: &str, specialty: &str, metric: Metric, k: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.scenario == scenario
                && r.partition == partition
                && r.specialty == specialty
                && r.metric == metric
                && r.k == k
        })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "scenario", "partition", "specialty", "metric", "K", "value", "n_patients"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let k = r.k.to_string();
            let value = r.value.map(|v| v.to_string()).unwrap_or_default();
            let n = r.n_patients.to_string();
            out.write_record([
                r.method.as_str(),
                &r.scenario,
                &r.partition,
                &r.specialty,
                r.metric.name(),
                &k,
                &value,
                &n,
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses the layout written by [`EvalReport::write_csv`].
    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>().map_err(csv_err)?;
        Ok(EvalReport {
            ps_normalization: PS_NORMALIZATION.to_string(),
            rows,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl DiversityReport {
    /// `doctor_id,specialty,label_count,prediction_count` rows.
    pub fn write_doctor_csv(&self, w: impl Write, catalog: &Catalog) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["doctor_id", "specialty", "label_count", "prediction_count"])
            .map_err(csv_err)?;
        for d in &self.per_doctor {
            let meta = &catalog.doctors[d.doctor as usize];
            let spec = meta
                .primary_specialty()
                .map(|s| catalog.specialties[s as usize].clone())
                .unwrap_or_default();
            out.write_record([meta.id.clone(), spec, d.label_count.to_string(), d.prediction_count.to_string()])
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `n_specialties,n_patients` rows.
    pub fn write_histogram_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n_specialties", "n_patients"]).map_err(csv_err)?;
        for (j, &c) in self.histogram.iter().enumerate() {
            out.write_record([j.to_string(), c.to_string()]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn precision_examples() {
        assert_abs_diff_eq!(precision_at_k(&[1, 2, 3], &[1, 3], 3), 2.0 / 3.0);
        assert_eq!(precision_at_k(&[1, 2], &[1, 2, 5], 2), 1.0);
        assert_abs_diff_eq!(precision_at_k(&[4], &[4], 3), 1.0 / 3.0);
    }

    #[test]
    fn ndcg_examples() {
        assert_abs_diff_eq!(ndcg_at_k(&[1, 2, 3], &[1, 3], 3), 0.9197207891481876, epsilon = 1e-12);
        assert_eq!(ndcg_at_k(&[3, 1, 9], &[1, 3], 3), 1.0);
        assert_eq!(ndcg_at_k(&[7, 8], &[1, 3], 2), 0.0);
    }

    #[test]
    fn recall_examples() {
        let pred: Vec<u32> = (0..10).collect();
        assert_eq!(recall_at_k(&pred, &[2, 5, 20, 30], 10), 0.5);
        assert_eq!(recall_at_k(&pred, &[2, 5], 10), 1.0);
        assert_eq!(recall_at_k(&[], &[2, 5], 10), 0.0);
    }

    #[test]
    fn propensity_oracle_values() {
        let p = fit_propensities(&[1, 100, 10000], 10000, 0.55, 1.5).unwrap();
        assert_abs_diff_eq!(p.values[0], 0.10857362047581294, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values[1], 0.4829261550024062, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values[2], 0.9210293337229419, epsilon = 1e-12);
        let eq = fit_propensities(&[5, 5, 5], 100, 0.55, 1.5).unwrap();
        assert!(eq.values.windows(2).all(|w| w[0] == w[1]));
        assert!(fit_propensities(&[1], 1, 0.55, 1.5).is_err());
        let small = fit_propensities(&[0, 1], 2, 0.55, 1.5).unwrap();
        assert!(small.values.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    /// Direct evaluation of the weighted sums over a ranking.
    fn oracle(pred: &[u32], rel: &[u32], w: &[f64], k: usize, kind: PsKind) -> f64 {
        let top = &pred[..pred.len().min(k)];
        let hits: Vec<(usize, u32)> = top.iter().copied().enumerate().filter(|(_, l)| rel.contains(l)).collect();
        let mut ws: Vec<f64> = rel.iter().map(|&l| w[l as usize]).collect();
        ws.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let m = ws.len().min(k);
        match kind {
            PsKind::Precision => {
                let num: f64 = hits.iter().map(|&(_, l)| w[l as usize]).sum::<f64>() / k as f64;
                let den: f64 = ws[..m].iter().sum::<f64>() / m as f64;
                num / den
            }
            PsKind::Ndcg => {
                let num: f64 = hits.iter().map(|&(i, l)| w[l as usize] / ((i + 2) as f64).log2()).sum();
                let den: f64 = (0..m).map(|i| ws[i] / ((i + 2) as f64).log2()).sum();
                num / den
            }
        }
    }

    #[test]
    fn ps_metrics_match_enumeration() {
        let props = Propensities { a: 0.55, b: 1.5, c: 1.0, values: vec![0.2, 0.5, 0.9] };
        let w: Vec<f64> = props.values.iter().map(|p| 1.0 / p).collect();
        let perms: Vec<Vec<u32>> = vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ];
        for mask in 1u32..8 {
            let rel: Vec<u32> = (0..3).filter(|l| mask & (1 << l) != 0).collect();
            for perm in &perms {
                for len in 0..=3 {
                    let pred = &perm[..len];
                    for kind in [PsKind::Precision, PsKind::Ndcg] {
                        let got = ps_metric_at_k(pred, &rel, &props, 2, kind);
                        assert_abs_diff_eq!(got, oracle(pred, &rel, &w, 2, kind), epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_head_or_tail_hit_normalizes_to_one() {
        let p = fit_propensities(&[1, 1000], 2000, 0.55, 1.5).unwrap();
        for l in [0, 1] {
            assert_abs_diff_eq!(ps_metric_at_k(&[l], &[l], &p, 1, PsKind::Precision), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ps_metric_at_k(&[l], &[l], &p, 3, PsKind::Ndcg), 1.0, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn metric_identities(
            pred in proptest::collection::vec(0u32..20, 0..15),
            rel in proptest::collection::btree_set(0u32..20, 1..8),
            k in 1usize..12,
        ) {
            let mut pred = pred;
            let mut seen = std::collections::HashSet::new();
            pred.retain(|l| seen.insert(*l));
            let rel: Vec<u32> = rel.into_iter().collect();
            let uniform = Propensities::uniform(20);
            let p = precision_at_k(&pred, &rel, k);
            let r = recall_at_k(&pred, &rel, k);
            let n = ndcg_at_k(&pred, &rel, k);
            for v in [p, r, n] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((r - p * k as f64 / rel.len() as f64).abs() < 1e-12);
            prop_assert!((ps_metric_at_k(&pred, &rel, &uniform, k, PsKind::Precision) - p).abs() < 1e-12);
            prop_assert!((ps_metric_at_k(&pred, &rel, &uniform, k, PsKind::Ndcg) - n).abs() < 1e-12);
            let m = k.min(rel.len());
            let perfect = pred.len() >= m && pred[..m].iter().all(|l| rel.contains(l));
            prop_assert_eq!((n - 1.0).abs() < 1e-12, perfect);
        }
    }

    #[test]
    fn gini_bounds() {
        assert_eq!(gini(&[]), 0.0);
        assert_eq!(gini(&[3.0, 3.0, 3.0]), 0.0);
        assert_abs_diff_eq!(gini(&[0.0, 0.0, 0.0, 4.0]), 0.75, epsilon = 1e-12);
    }
}
