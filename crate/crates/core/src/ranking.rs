//! Ranked doctor lists shared by every recommender.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dataset::Catalog;
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

/// Ordered `(doctor, score)` pairs for one patient: scores non-increasing,
/// ties by ascending doctor index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RankedPrediction {
    pub patient: u32,
    pub entries: Vec<(u32, f32)>,
}

impl RankedPrediction {
    pub fn empty(patient: u32) -> Self {
        RankedPrediction {
            patient,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doctors(&self) -> Vec<u32> {
        self.entries.iter().map(|&(d, _)| d).collect()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }
}

/// Descending by score, ascending by index on ties.
pub fn rank_order(a: &(u32, f32), b: &(u32, f32)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` best `(label, score)` pairs in ranking order.
pub fn top_k(mut scored: Vec<(u32, f32)>, k: usize) -> Vec<(u32, f32)> {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

/// Order-preserving subsequence of doctors having `specialty`.
pub fn filter_by_specialty(
    prediction: &RankedPrediction,
    specialty: u32,
    catalog: &Catalog,
) -> Result<RankedPrediction> {
    if specialty as usize >= catalog.specialties.len() {
        return Err(Error::UnknownSpecialty(specialty.to_string()));
    }
    Ok(RankedPrediction {
        patient: prediction.patient,
        entries: prediction
            .entries
            .iter()
            .copied()
            .filter(|&(d, _)| catalog.doctors[d as usize].has_specialty(specialty))
            .collect(),
    })
}

/// What a recommender may look at when ranking for one patient.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub patient: u32,
    pub features: &'a SparseVec,
}

pub trait Ranker {
    /// Up to `k` doctors for the queried patient.
    fn rank(&self, query: &Query<'_>, k: usize) -> RankedPrediction;
}

#[cfg(feature = "parallel")]
pub fn rank_all<R: Ranker + Sync>(ranker: &R, queries: &[Query<'_>], k: usize, parallel: bool) -> Vec<RankedPrediction> {
    use rayon::prelude::*;
    if parallel {
        queries.par_iter().map(|q| ranker.rank(q, k)).collect()
    } else {
        queries.iter().map(|q| ranker.rank(q, k)).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn rank_all<R: Ranker + Sync>(ranker: &R, queries: &[Query<'_>], k: usize, _parallel: bool) -> Vec<RankedPrediction> {
    queries.iter().map(|q| ranker.rank(q, k)).collect()
}

/// One line per patient: `patient_id doctor_id:score ...`.
pub fn write_predictions(path: &Path, predictions: &[RankedPrediction], catalog: &Catalog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for pred in predictions {
        write!(w, "{}", catalog.patients[pred.patient as usize].id)?;
        for &(d, s) in &pred.entries {
            write!(w, " {}:{}", catalog.doctors[d as usize].id, s)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a prediction file, resolving ids through `resolve_patient` and `resolve_doctor`.
pub fn read_predictions(
    path: &Path,
    mut resolve_patient: impl FnMut(&str) -> Option<u32>,
    mut resolve_doctor: impl FnMut(&str) -> Option<u32>,
) -> Result<Vec<RankedPrediction>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = k as u64 + 1;
        let mut toks = line.split_whitespace();
        let Some(pid) = toks.next() else { continue };
        let patient = resolve_patient(pid).ok_or_else(|| Error::DanglingId {
            kind: "patient",
            id: pid.to_string(),
        })?;
        let mut entries = Vec::new();
        for tok in toks {
            let (d, s) = tok
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(path, line_no, format!("expected doctor:score, got `{tok}`")))?;
            let doctor = resolve_doctor(d).ok_or_else(|| Error::DanglingId {
                kind: "doctor",
                id: d.to_string(),
            })?;
            let score: f32 = s
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad score `{s}`")))?;
            entries.push((doctor, score));
        }
        out.push(RankedPrediction { patient, entries });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{DoctorMeta, Sex};

    fn catalog() -> Arc<Catalog> {
        let doctors = [0u32, 1, 0]
            .iter()
            .enumerate()
            .map(|(i, &s)| DoctorMeta {
                id: format!("d{}", i + 1),
                sex: Sex::Male,
                age: 40,
                specialties: vec![s],
                institutions: vec![],
            })
            .collect();
        Arc::new(Catalog::new(vec![], doctors, vec![], vec!["A".into(), "B".into()], vec![], 120).unwrap())
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_index() {
        let got = top_k(vec![(3, 0.5), (1, 0.9), (0, 0.5), (2, 0.1)], 3);
        assert_eq!(got, vec![(1, 0.9), (0, 0.5), (3, 0.5)]);
        assert_eq!(top_k(vec![(0, 1.0)], 5).len(), 1);
        assert!(top_k(vec![(0, 1.0)], 0).is_empty());
    }

    #[test]
    fn filter_keeps_order() {
        let cat = catalog();
        let pred = RankedPrediction { patient: 0, entries: vec![(0, 3.0), (1, 2.0), (2, 1.0)] };
        let a = filter_by_specialty(&pred, 0, &cat).unwrap();
        assert_eq!(a.doctors(), vec![0, 2]);
        let only_b = RankedPrediction { patient: 0, entries: vec![(1, 2.0)] };
        assert!(filter_by_specialty(&only_b, 0, &cat).unwrap().is_empty());
        assert_eq!(filter_by_specialty(&only_b, 1, &cat).unwrap(), only_b);
        assert!(matches!(filter_by_specialty(&pred, 7, &cat), Err(Error::UnknownSpecialty(_))));
    }
}
