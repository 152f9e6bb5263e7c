//! Shared patient/doctor feature space.
//!
//! Layout of every vector, for both roles:
//!
//! | block          | width | patients                         | doctors                      |
//! |----------------|-------|----------------------------------|------------------------------|
//! | baseline       | 3     | sex, age, train occurrences      | sex, age, train occurrences  |
//! | education      | N_e   | always zero                      | attended institutions        |
//! | specialization | N_s   | share of visits per specialty    | specialty indicator          |
//! | hospital       | N_h   | visit shares or proximity        | share of consultations       |
//!
//! Ages and occurrence counts are divided by their train maxima (patients and
//! doctors separately) and clipped to 1. Which blocks are populated depends on
//! the [`Scenario`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, ConsultationDataset, DoctorMeta, PatientMeta, Sex};
use crate::error::{Error, Result};
use crate::sparse::{SparseMatrix, SparseVec};

pub const N_BASELINE: u32 = 3;

/// Distances below this (km) are clamped before inversion.
pub const MIN_DISTANCE_KM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4, Scenario::S5];

    pub fn uses_specialty(self) -> bool {
        matches!(self, Scenario::S2 | Scenario::S5)
    }

    pub fn uses_hospital(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4 | Scenario::S5)
    }

    /// The patient hospital encoding this scenario prescribes, if any.
    pub fn required_encoding(self) -> Option<HospitalEncoding> {
        match self {
            Scenario::S1 | Scenario::S2 => None,
            Scenario::S3 => Some(HospitalEncoding::Visits),
            Scenario::S4 | Scenario::S5 => Some(HospitalEncoding::Distances),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            "S5" => Ok(Scenario::S5),
            _ => Err(Error::InvalidParameter(format!("unknown scenario `{s}`"))),
        }
    }
}

/// Patient-side hospital encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HospitalEncoding {
    /// Encoding 1: l1-normalized train visit counts per hospital.
    Visits,
    /// Encoding 2: inverse distance to each hospital, scaled so the maximum is 1.
    Distances,
}

impl FromStr for HospitalEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "visits" | "encoding1" | "1" => Ok(HospitalEncoding::Visits),
            "distances" | "encoding2" | "2" => Ok(HospitalEncoding::Distances),
            _ => Err(Error::InvalidParameter(format!("unknown hospital encoding `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub hospital_encoding: Option<HospitalEncoding>,
}

impl ScenarioConfig {
    /// Validates the encoding against the scenario. `None` picks the prescribed
    /// one; S1 and S2 accept any encoding because their hospital block is zero.
    pub fn new(scenario: Scenario, encoding: Option<HospitalEncoding>) -> Result<Self> {
        let required = scenario.required_encoding();
        match (required, encoding) {
            (Some(r), Some(e)) if r != e => Err(Error::InvalidParameter(format!(
                "scenario {scenario} requires {r:?} hospital encoding, got {e:?}"
            ))),
            (Some(r), _) => Ok(ScenarioConfig {
                scenario,
                hospital_encoding: Some(r),
            }),
            (None, _) => Ok(ScenarioConfig {
                scenario,
                hospital_encoding: None,
            }),
        }
    }

    pub fn of(scenario: Scenario) -> Self {
        Self::new(scenario, None).expect("prescribed encoding is always valid")
    }
}

/// Per-subject counts gathered from the training partition.
#[derive(Clone, Debug)]
pub struct TrainStats {
    pub patient_occurrences: Vec<u32>,
    pub doctor_occurrences: Vec<u32>,
    /// Per patient: visits per catalog specialty (a visit counts for every specialty of the doctor).
    pub patient_specialty_visits: Vec<Vec<(u32, u32)>>,
    /// Per patient: visits per hospital.
    pub patient_hospital_visits: Vec<Vec<(u32, u32)>>,
    /// Per doctor: consultations per hospital.
    pub doctor_hospital_visits: Vec<Vec<(u32, u32)>>,
}

fn bump(list: &mut Vec<(u32, u32)>, key: u32) {
    match list.iter_mut().find(|(k, _)| *k == key) {
        Some(e) => e.1 += 1,
        None => list.push((key, 1)),
    }
}

impl TrainStats {
    pub fn from_dataset(train: &ConsultationDataset) -> Self {
        let cat = &train.catalog;
        let mut s = TrainStats {
            patient_occurrences: vec![0; cat.n_patients()],
            doctor_occurrences: vec![0; cat.n_doctors()],
            patient_specialty_visits: vec![Vec::new(); cat.n_patients()],
            patient_hospital_visits: vec![Vec::new(); cat.n_patients()],
            doctor_hospital_visits: vec![Vec::new(); cat.n_doctors()],
        };
        for it in &train.interactions {
            let (p, d) = (it.patient as usize, it.doctor as usize);
            s.patient_occurrences[p] += 1;
            s.doctor_occurrences[d] += 1;
            for &spec in &cat.doctors[d].specialties {
                bump(&mut s.patient_specialty_visits[p], spec);
            }
            bump(&mut s.patient_hospital_visits[p], it.hospital);
            bump(&mut s.doctor_hospital_visits[d], it.hospital);
        }
        for v in s
            .patient_specialty_visits
            .iter_mut()
            .chain(s.patient_hospital_visits.iter_mut())
            .chain(s.doctor_hospital_visits.iter_mut())
        {
            v.sort_unstable();
        }
        s
    }
}

/// Dimensions, block offsets and train-derived normalizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub n_education: u32,
    pub n_specialty: u32,
    pub n_hospital: u32,
    /// Catalog institution → education slot; `None` for institutions unseen in train.
    pub institution_slot: Vec<Option<u32>>,
    /// Catalog specialty → specialization slot.
    pub specialty_slot: Vec<Option<u32>>,
    pub max_patient_age: u32,
    pub max_doctor_age: u32,
    pub max_patient_occurrences: u32,
    pub max_doctor_occurrences: u32,
}

impl FeatureSpace {
    /// Derives the space from the training partition only. Education and
    /// specialization slots cover institutions and specialties of doctors with
    /// at least one train consultation, in catalog order; the hospital block
    /// covers every hospital in the catalog.
    pub fn build(train: &ConsultationDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyTrain);
        }
        let cat = &train.catalog;
        let stats = TrainStats::from_dataset(train);
        let mut inst_used = vec![false; cat.institutions.len()];
        let mut spec_used = vec![false; cat.specialties.len()];
        let mut max_doctor_age = 0;
        for (d, doc) in cat.doctors.iter().enumerate() {
            if stats.doctor_occurrences[d] == 0 {
                continue;
            }
            max_doctor_age = max_doctor_age.max(doc.age);
            for &i in &doc.institutions {
                inst_used[i as usize] = true;
            }
            for &s in &doc.specialties {
                spec_used[s as usize] = true;
            }
        }
        let slots = |used: &[bool]| -> (Vec<Option<u32>>, u32) {
            let mut next = 0u32;
            let v = used
                .iter()
                .map(|&u| {
                    u.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect();
            (v, next)
        };
        let (institution_slot, n_education) = slots(&inst_used);
        let (specialty_slot, n_specialty) = slots(&spec_used);
        let max_patient_age = cat
            .patients
            .iter()
            .enumerate()
            .filter(|(p, _)| stats.patient_occurrences[*p] > 0)
            .map(|(_, pm)| pm.age)
            .max()
            .unwrap_or(0);
        Ok(FeatureSpace {
            n_education,
            n_specialty,
            n_hospital: cat.n_hospitals() as u32,
            institution_slot,
            specialty_slot,
            max_patient_age,
            max_doctor_age,
            max_patient_occurrences: stats.patient_occurrences.iter().copied().max().unwrap_or(0),
            max_doctor_occurrences: stats.doctor_occurrences.iter().copied().max().unwrap_or(0),
        })
    }

    /// N = 3 + N_e + N_s + N_h.
    pub fn dim(&self) -> u32 {
        N_BASELINE + self.n_education + self.n_specialty + self.n_hospital
    }

    pub fn education_offset(&self) -> u32 {
        N_BASELINE
    }

    pub fn specialty_offset(&self) -> u32 {
        N_BASELINE + self.n_education
    }

    pub fn hospital_offset(&self) -> u32 {
        N_BASELINE + self.n_education + self.n_specialty
    }

    /// Half-open index ranges of the four blocks.
    pub fn blocks(&self) -> [(&'static str, std::ops::Range<u32>); 4] {
        [
            ("baseline", 0..N_BASELINE),
            ("education", self.education_offset()..self.specialty_offset()),
            ("specialization", self.specialty_offset()..self.hospital_offset()),
            ("hospital", self.hospital_offset()..self.dim()),
        ]
    }

    fn baseline(&self, sex: Sex, age: u32, max_age: u32, occ: u32, max_occ: u32) -> [(u32, f32); 3] {
        [
            (0, if sex == Sex::Female { 1.0 } else { 0.0 }),
            (1, ratio(age, max_age)),
            (2, ratio(occ, max_occ)),
        ]
    }

    pub fn encode_doctor(
        &self,
        doctor: u32,
        meta: &DoctorMeta,
        stats: &TrainStats,
        scenario: ScenarioConfig,
    ) -> SparseVec {
        let d = doctor as usize;
        let mut entries: Vec<(u32, f32)> = self
            .baseline(
                meta.sex,
                meta.age,
                self.max_doctor_age,
                stats.doctor_occurrences.get(d).copied().unwrap_or(0),
                self.max_doctor_occurrences,
            )
            .to_vec();
        let mut edu: Vec<(u32, f32)> = meta
            .institutions
            .iter()
            .filter_map(|&i| self.institution_slot.get(i as usize).copied().flatten())
            .map(|slot| (self.education_offset() + slot, 1.0))
            .collect();
        edu.sort_unstable_by_key(|e| e.0);
        edu.dedup_by_key(|e| e.0);
        entries.extend(edu);

        if scenario.scenario.uses_specialty() {
            let mut spec: Vec<(u32, f32)> = meta
                .specialties
                .iter()
                .filter_map(|&s| self.specialty_slot.get(s as usize).copied().flatten())
                .map(|slot| (self.specialty_offset() + slot, 1.0))
                .collect();
            spec.sort_unstable_by_key(|e| e.0);
            spec.dedup_by_key(|e| e.0);
            entries.extend(spec);
        }
        if scenario.scenario.uses_hospital() {
            if let Some(visits) = stats.doctor_hospital_visits.get(d) {
                entries.extend(self.hospital_shares(visits));
            }
        }
        finish(self.dim(), entries)
    }

    pub fn encode_patient(
        &self,
        patient: u32,
        meta: &PatientMeta,
        stats: &TrainStats,
        catalog: &Catalog,
        scenario: ScenarioConfig,
    ) -> Result<SparseVec> {
        let p = patient as usize;
        let occ = stats.patient_occurrences.get(p).copied().unwrap_or(0);
        let mut entries: Vec<(u32, f32)> = self
            .baseline(meta.sex, meta.age, self.max_patient_age, occ, self.max_patient_occurrences)
            .to_vec();

        if scenario.scenario.uses_specialty() && occ > 0 {
            for &(s, count) in &stats.patient_specialty_visits[p] {
                if let Some(slot) = self.specialty_slot.get(s as usize).copied().flatten() {
                    entries.push((self.specialty_offset() + slot, count as f32 / occ as f32));
                }
            }
        }
        match scenario.hospital_encoding.filter(|_| scenario.scenario.uses_hospital()) {
            Some(HospitalEncoding::Visits) => {
                if let Some(visits) = stats.patient_hospital_visits.get(p) {
                    entries.extend(self.hospital_shares(visits));
                }
            }
            Some(HospitalEncoding::Distances) => {
                let loc = meta.location.ok_or_else(|| Error::MissingLocation(meta.id.clone()))?;
                let inv: Vec<f64> = catalog
                    .hospitals
                    .iter()
                    .map(|h| 1.0 / loc.distance(&h.location).max(MIN_DISTANCE_KM))
                    .collect();
                let max = inv.iter().copied().fold(0.0, f64::max);
                if max > 0.0 {
                    let off = self.hospital_offset();
                    entries.extend(
                        inv.iter()
                            .enumerate()
                            .map(|(h, &v)| (off + h as u32, (v / max) as f32)),
                    );
                }
            }
            None => {}
        }
        Ok(finish(self.dim(), entries))
    }

    fn hospital_shares(&self, visits: &[(u32, u32)]) -> impl Iterator<Item = (u32, f32)> + '_ {
        let total: u32 = visits
            .iter()
            .filter(|(h, _)| *h < self.n_hospital)
            .map(|&(_, c)| c)
            .sum();
        let off = self.hospital_offset();
        let list: Vec<(u32, f32)> = if total == 0 {
            Vec::new()
        } else {
            visits
                .iter()
                .filter(|(h, _)| *h < self.n_hospital)
                .map(|&(h, c)| (off + h, c as f32 / total as f32))
                .collect()
        };
        list.into_iter()
    }
}

fn ratio(v: u32, max: u32) -> f32 {
    if max == 0 {
        0.0
    } else {
        (v as f32 / max as f32).min(1.0)
    }
}

fn finish(dim: u32, mut entries: Vec<(u32, f32)>) -> SparseVec {
    entries.retain(|&(_, v)| v != 0.0);
    entries.sort_by_key(|e| e.0);
    SparseVec { dim, entries }
}

/// A feature space bundled with the statistics needed to encode subjects.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub space: FeatureSpace,
    pub stats: TrainStats,
}

impl Encoder {
    pub fn fit(train: &ConsultationDataset) -> Result<Self> {
        Ok(Encoder {
            space: FeatureSpace::build(train)?,
            stats: TrainStats::from_dataset(train),
        })
    }

    pub fn dim(&self) -> u32 {
        self.space.dim()
    }

    /// One row per catalog doctor, in catalog order.
    pub fn doctor_matrix(&self, catalog: &Catalog, scenario: ScenarioConfig) -> SparseMatrix {
        let rows = catalog
            .doctors
            .iter()
            .enumerate()
            .map(|(d, meta)| self.space.encode_doctor(d as u32, meta, &self.stats, scenario))
            .collect();
        SparseMatrix {
            n_cols: self.dim(),
            rows,
        }
    }

    /// One row per listed patient, in the given order. Histories come from train;
    /// patients absent from train encode as new patients.
    pub fn patient_matrix(
        &self,
        catalog: &Catalog,
        patients: &[u32],
        scenario: ScenarioConfig,
    ) -> Result<SparseMatrix> {
        let rows = patients
            .iter()
            .map(|&p| {
                self.space
                    .encode_patient(p, &catalog.patients[p as usize], &self.stats, catalog, scenario)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseMatrix {
            n_cols: self.dim(),
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{HospitalMeta, Interaction, Location};

    /// 2 patients, 3 doctors over specialties {A, B}, 4 institutions, 3 hospitals.
    fn fixture() -> ConsultationDataset {
        let patients = vec![
            PatientMeta { id: "p0".into(), sex: Sex::Female, age: 80, location: Some(Location::new(0.0, 0.0)) },
            PatientMeta { id: "p1".into(), sex: Sex::Male, age: 20, location: None },
            PatientMeta { id: "p2".into(), sex: Sex::Male, age: 100, location: Some(Location::new(0.0, 0.0)) },
        ];
        let doctors = vec![
            DoctorMeta { id: "d0".into(), sex: Sex::Male, age: 35, specialties: vec![0], institutions: vec![2] },
            DoctorMeta { id: "d1".into(), sex: Sex::Female, age: 70, specialties: vec![1], institutions: vec![0, 1, 3] },
            DoctorMeta { id: "d2".into(), sex: Sex::Female, age: 50, specialties: vec![0], institutions: vec![4] },
        ];
        let hospitals = vec![
            HospitalMeta { id: "h0".into(), location: Location::new(1.0, 0.0) },
            HospitalMeta { id: "h1".into(), location: Location::new(0.0, 2.0) },
            HospitalMeta { id: "h2".into(), location: Location::new(4.0, 0.0) },
        ];
        let cat = Catalog::new(
            patients,
            doctors,
            hospitals,
            vec!["A".into(), "B".into()],
            (0..5).map(|i| format!("i{i}")).collect(),
            120,
        )
        .unwrap();
        let mut its = Vec::new();
        let mut push = |p, d, h, n| {
            for k in 0..n {
                its.push(Interaction { patient: p, doctor: d, hospital: h, timestamp: 1 + k as i64 });
            }
        };
        // doctor 0: 30 consultations at h0, 10 at h1; patient 0 sees A three times, B once.
        push(0, 0, 0, 3);
        push(0, 1, 1, 1);
        push(1, 0, 0, 27);
        push(1, 0, 1, 10);
        ConsultationDataset::new(Arc::new(cat), its).unwrap()
    }

    #[test]
    fn dimension_counts_train_institutions() {
        let ds = fixture();
        let space = FeatureSpace::build(&ds).unwrap();
        // institutions of d0 and d1 only (d2 never consulted): {0,1,2,3}
        assert_eq!(space.n_education, 4);
        assert_eq!(space.n_specialty, 2);
        assert_eq!(space.n_hospital, 3);
        assert_eq!(space.dim(), 3 + 4 + 2 + 3);
        assert_eq!(space.institution_slot[4], None);
        assert_eq!(space.max_patient_age, 80);
        assert_eq!(space.max_doctor_age, 70);
    }

    #[test]
    fn doctor_blocks() {
        let ds = fixture();
        let enc = Encoder::fit(&ds).unwrap();
        let cat = &ds.catalog;
        let s3 = ScenarioConfig::of(Scenario::S3);
        let v = enc.space.encode_doctor(0, &cat.doctors[0], &enc.stats, s3);
        assert_eq!(v.get(1), 0.5);
        let h = enc.space.hospital_offset();
        assert_eq!(v.get(h), 0.75);
        assert_eq!(v.get(h + 1), 0.25);

        let s1 = ScenarioConfig::of(Scenario::S1);
        let v = enc.space.encode_doctor(0, &cat.doctors[0], &enc.stats, s1);
        let e = enc.space.education_offset();
        assert_eq!(v.get(e + 2), 1.0);
        let edu: Vec<u32> = v.indices().filter(|&i| i >= e).collect();
        assert_eq!(edu, vec![e + 2]);
    }

    #[test]
    fn unseen_institution_dropped_and_absent_doctor_zero_history() {
        let ds = fixture();
        let enc = Encoder::fit(&ds).unwrap();
        let v = enc
            .space
            .encode_doctor(2, &ds.catalog.doctors[2], &enc.stats, ScenarioConfig::of(Scenario::S5));
        let e = enc.space.education_offset();
        assert!(v.indices().all(|i| !(e..e + 4).contains(&i)));
        assert_eq!(v.get(2), 0.0);
        assert!(v.indices().all(|i| i < enc.space.hospital_offset()));
    }

    #[test]
    fn patient_specialty_proportions() {
        let ds = fixture();
        let enc = Encoder::fit(&ds).unwrap();
        let cat = &ds.catalog;
        let v = enc
            .space
            .encode_patient(0, &cat.patients[0], &enc.stats, cat, ScenarioConfig::of(Scenario::S2))
            .unwrap();
        let s = enc.space.specialty_offset();
        assert_eq!(v.get(s), 0.75);
        assert_eq!(v.get(s + 1), 0.25);
        let e = enc.space.education_offset();
        assert!(v.indices().all(|i| !(e..s).contains(&i)));
    }

    #[test]
    fn distance_encoding_inverse_then_linf() {
        let ds = fixture();
        let enc = Encoder::fit(&ds).unwrap();
        let cat = &ds.catalog;
        let v = enc
            .space
            .encode_patient(0, &cat.patients[0], &enc.stats, cat, ScenarioConfig::of(Scenario::S4))
            .unwrap();
        let h = enc.space.hospital_offset();
        assert_eq!([v.get(h), v.get(h + 1), v.get(h + 2)], [1.0, 0.5, 0.25]);
    }

    #[test]
    fn missing_location_with_distances_fails() {
        let ds = fixture();
        let enc = Encoder::fit(&ds).unwrap();
        let cat = &ds.catalog;
        let err = enc
            .space
            .encode_patient(1, &cat.patients[1], &enc.stats, cat, ScenarioConfig::of(Scenario::S4))
            .unwrap_err();
        assert!(matches!(err, Error::MissingLocation(_)));
        assert!(enc
            .space
            .encode_patient(1, &cat.patients[1], &enc.stats, cat, ScenarioConfig::of(Scenario::S3))
            .is_ok());
    }

    #[test]
    fn new_patient_has_no_history_and_clipped_age() {
        let ds = fixture();
        let enc = Encoder::fit(&ds).unwrap();
        let cat = &ds.catalog;
        let v = enc
            .space
            .encode_patient(2, &cat.patients[2], &enc.stats, cat, ScenarioConfig::of(Scenario::S2))
            .unwrap();
        assert_eq!(v.get(2), 0.0);
        assert_eq!(v.get(1), 1.0);
        let s = enc.space.specialty_offset();
        assert!(v.indices().all(|i| i < s));
    }

    #[test]
    fn scenario_encoding_constraints() {
        assert!(ScenarioConfig::new(Scenario::S3, Some(HospitalEncoding::Distances)).is_err());
        assert!(ScenarioConfig::new(Scenario::S4, Some(HospitalEncoding::Visits)).is_err());
        assert!(ScenarioConfig::new(Scenario::S5, Some(HospitalEncoding::Distances)).is_ok());
        let s1 = ScenarioConfig::new(Scenario::S1, Some(HospitalEncoding::Distances)).unwrap();
        assert_eq!(s1.hospital_encoding, None);
        assert_eq!("s-4".parse::<Scenario>().unwrap(), Scenario::S4);
    }

    #[test]
    fn empty_train_rejected() {
        let ds = fixture().with_interactions(vec![]);
        assert!(matches!(FeatureSpace::build(&ds), Err(Error::EmptyTrain)));
    }
}
