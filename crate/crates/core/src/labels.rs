//! Implicit ratings and binary labels.
//!
//! `R[p][l] = n_pl / n_ps`, where `n_ps` counts the patient's visits to doctors
//! of the primary specialty of `l`; `Y[p][l] = 1` iff `R[p][l] > r_min`.

use std::collections::BTreeMap;

use crate::dataset::{Catalog, Interaction};
use crate::error::{Error, Result};
use crate::sparse::{SparseMatrix, SparseVec};

/// Sparse P×L ratings; rows indexed by catalog patient, entries sorted by doctor.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    pub n_doctors: u32,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl RatingMatrix {
    pub fn n_patients(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn get(&self, patient: u32, doctor: u32) -> Option<f64> {
        let row = self.rows.get(patient as usize)?;
        row.binary_search_by_key(&doctor, |&(d, _)| d)
            .ok()
            .map(|i| row[i].1)
    }

    /// Ratings of the listed patients as a sparse text-format matrix.
    pub fn to_sparse(&self, patients: &[u32]) -> SparseMatrix {
        SparseMatrix {
            n_cols: self.n_doctors,
            rows: patients
                .iter()
                .map(|&p| SparseVec {
                    dim: self.n_doctors,
                    entries: self.rows[p as usize]
                        .iter()
                        .map(|&(d, r)| (d, r as f32))
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Binary P×L labels with the threshold that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub n_doctors: u32,
    pub r_min: f64,
    /// Positive doctors per patient, ascending.
    pub rows: Vec<Vec<u32>>,
}

impl LabelMatrix {
    /// Wraps explicit label rows (sorted and deduplicated here).
    pub fn from_rows(n_doctors: u32, mut rows: Vec<Vec<u32>>) -> Result<Self> {
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&d| d >= n_doctors) {
                return Err(Error::DimensionMismatch(format!(
                    "label index outside {n_doctors} doctors"
                )));
            }
        }
        Ok(LabelMatrix {
            n_doctors,
            r_min: 0.0,
            rows,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, patient: u32) -> &[u32] {
        &self.rows[patient as usize]
    }

    /// Patients with at least one label, ascending.
    pub fn labelled_patients(&self) -> Vec<u32> {
        (0..self.rows.len() as u32)
            .filter(|&p| !self.rows[p as usize].is_empty())
            .collect()
    }

    /// Number of patients carrying each label.
    pub fn label_frequencies(&self) -> Vec<u32> {
        let mut freq = vec![0u32; self.n_doctors as usize];
        for row in &self.rows {
            for &d in row {
                freq[d as usize] += 1;
            }
        }
        freq
    }

    /// Selects rows for the listed patients.
    pub fn select(&self, patients: &[u32]) -> Vec<Vec<u32>> {
        patients.iter().map(|&p| self.rows[p as usize].clone()).collect()
    }

    pub fn to_sparse(&self, patients: &[u32]) -> SparseMatrix {
        SparseMatrix {
            n_cols: self.n_doctors,
            rows: patients
                .iter()
                .map(|&p| SparseVec {
                    dim: self.n_doctors,
                    entries: self.rows[p as usize].iter().map(|&d| (d, 1.0)).collect(),
                })
                .collect(),
        }
    }

    pub fn from_sparse(m: &SparseMatrix) -> Self {
        LabelMatrix {
            n_doctors: m.n_cols,
            r_min: 0.0,
            rows: m
                .rows
                .iter()
                .map(|r| r.entries.iter().filter(|e| e.1 > 0.0).map(|e| e.0).collect())
                .collect(),
        }
    }
}

/// Builds ratings from the given interactions; doctors count under their first-listed specialty.
pub fn build_ratings(interactions: &[Interaction], catalog: &Catalog) -> Result<RatingMatrix> {
    let mut primary = Vec::with_capacity(catalog.n_doctors());
    for d in &catalog.doctors {
        primary.push(d.primary_specialty().ok_or_else(|| Error::NoSpecialty(d.id.clone()))?);
    }
    let mut visits: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); catalog.n_patients()];
    for it in interactions {
        *visits[it.patient as usize].entry(it.doctor).or_default() += 1;
    }
    let rows = visits
        .into_iter()
        .map(|row| {
            let mut per_spec: BTreeMap<u32, u32> = BTreeMap::new();
            for (&d, &n) in &row {
                *per_spec.entry(primary[d as usize]).or_default() += n;
            }
            row.iter()
                .map(|(&d, &n)| (d, n as f64 / per_spec[&primary[d as usize]] as f64))
                .collect()
        })
        .collect();
    Ok(RatingMatrix {
        n_doctors: catalog.n_doctors() as u32,
        rows,
    })
}

/// Keeps doctors with rating strictly above `r_min`.
pub fn threshold_labels(ratings: &RatingMatrix, r_min: f64) -> Result<LabelMatrix> {
    if !(0.0..1.0).contains(&r_min) {
        return Err(Error::InvalidParameter(format!("r_min must lie in [0, 1), got {r_min}")));
    }
    Ok(LabelMatrix {
        n_doctors: ratings.n_doctors,
        r_min,
        rows: ratings
            .rows
            .iter()
            .map(|row| row.iter().filter(|&&(_, r)| r > r_min).map(|&(d, _)| d).collect())
            .collect(),
    })
}
