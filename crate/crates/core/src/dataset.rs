//! Consultation logs and their metadata tables.
//!
//! Every identifier in the CSV inputs is opaque. Loading resolves them to
//! dense indices held by a shared [`Catalog`]; partitions produced by
//! [`temporal_split`] reuse the same catalog so patient and doctor indices
//! keep their meaning across train and test.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_AGE: u32 = 120;

pub const INTERACTIONS_HEADER: [&str; 4] = ["patient_id", "doctor_id", "hospital_id", "timestamp"];
pub const PATIENTS_HEADER: [&str; 5] = ["patient_id", "sex", "age", "loc_x", "loc_y"];
pub const DOCTORS_HEADER: [&str; 5] = ["doctor_id", "sex", "age", "specialties", "institutions"];
pub const HOSPITALS_HEADER: [&str; 3] = ["hospital_id", "loc_x", "loc_y"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn parse(s: &str) -> Option<Sex> {
        match s.trim() {
            "F" | "f" | "female" | "1" => Some(Sex::Female),
            "M" | "m" | "male" | "0" => Some(Sex::Male),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

/// Planar coordinates in kilometres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientMeta {
    pub id: String,
    pub sex: Sex,
    pub age: u32,
    pub location: Option<Location>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoctorMeta {
    pub id: String,
    pub sex: Sex,
    pub age: u32,
    /// Indices into [`Catalog::specialties`]; the first entry is the primary specialty.
    pub specialties: Vec<u32>,
    /// Indices into [`Catalog::institutions`].
    pub institutions: Vec<u32>,
}

impl DoctorMeta {
    pub fn primary_specialty(&self) -> Option<u32> {
        self.specialties.first().copied()
    }

    pub fn has_specialty(&self, specialty: u32) -> bool {
        self.specialties.contains(&specialty)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HospitalMeta {
    pub id: String,
    pub location: Location,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub patient: u32,
    pub doctor: u32,
    pub hospital: u32,
    /// Epoch seconds, UTC.
    pub timestamp: i64,
}

/// Metadata tables plus id → index lookups.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    pub patients: Vec<PatientMeta>,
    pub doctors: Vec<DoctorMeta>,
    pub hospitals: Vec<HospitalMeta>,
    pub specialties: Vec<String>,
    pub institutions: Vec<String>,
    patient_index: HashMap<String, u32>,
    doctor_index: HashMap<String, u32>,
    hospital_index: HashMap<String, u32>,
    specialty_index: HashMap<String, u32>,
}

impl Catalog {
    /// Builds a catalog, validating uniqueness of ids and the age bound.
    pub fn new(
        patients: Vec<PatientMeta>,
        doctors: Vec<DoctorMeta>,
        hospitals: Vec<HospitalMeta>,
        specialties: Vec<String>,
        institutions: Vec<String>,
        max_age: u32,
    ) -> Result<Self> {
        let patient_index = index_ids("patient", patients.iter().map(|p| p.id.as_str()))?;
        let doctor_index = index_ids("doctor", doctors.iter().map(|d| d.id.as_str()))?;
        let hospital_index = index_ids("hospital", hospitals.iter().map(|h| h.id.as_str()))?;
        let specialty_index = index_ids("specialty", specialties.iter().map(String::as_str))?;
        index_ids("institution", institutions.iter().map(String::as_str))?;

        for p in &patients {
            if p.age > max_age {
                return Err(Error::InvalidParameter(format!(
                    "patient `{}` age {} exceeds maximum {max_age}",
                    p.id, p.age
                )));
            }
        }
        for d in &doctors {
            if d.specialties.is_empty() {
                return Err(Error::NoSpecialty(d.id.clone()));
            }
            if d.age > max_age {
                return Err(Error::InvalidParameter(format!(
                    "doctor `{}` age {} exceeds maximum {max_age}",
                    d.id, d.age
                )));
            }
            let bad_spec = d.specialties.iter().any(|&s| s as usize >= specialties.len());
            let bad_inst = d.institutions.iter().any(|&i| i as usize >= institutions.len());
            if bad_spec || bad_inst {
                return Err(Error::InvalidParameter(format!(
                    "doctor `{}` references an out-of-range specialty or institution",
                    d.id
                )));
            }
        }

        Ok(Catalog {
            patients,
            doctors,
            hospitals,
            specialties,
            institutions,
            patient_index,
            doctor_index,
            hospital_index,
            specialty_index,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_doctors(&self) -> usize {
        self.doctors.len()
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospitals.len()
    }

    pub fn patient_by_id(&self, id: &str) -> Option<u32> {
        self.patient_index.get(id).copied()
    }

    pub fn doctor_by_id(&self, id: &str) -> Option<u32> {
        self.doctor_index.get(id).copied()
    }

    pub fn hospital_by_id(&self, id: &str) -> Option<u32> {
        self.hospital_index.get(id).copied()
    }

    pub fn specialty_by_id(&self, id: &str) -> Option<u32> {
        self.specialty_index.get(id).copied()
    }

    /// Doctor indices carrying `specialty` (primary or secondary).
    pub fn doctors_with_specialty(&self, specialty: u32) -> Vec<u32> {
        (0..self.doctors.len() as u32)
            .filter(|&d| self.doctors[d as usize].has_specialty(specialty))
            .collect()
    }
}

fn index_ids<'a>(
    kind: &'static str,
    ids: impl Iterator<Item = &'a str>,
) -> Result<HashMap<String, u32>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id.to_string(), i as u32).is_some() {
            return Err(Error::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(map)
}

/// Interactions over a shared catalog. Duplicate rows are meaningful (repeat visits).
#[derive(Clone, Debug)]
pub struct ConsultationDataset {
    pub catalog: Arc<Catalog>,
    pub interactions: Vec<Interaction>,
}

impl ConsultationDataset {
    pub fn new(catalog: Arc<Catalog>, interactions: Vec<Interaction>) -> Result<Self> {
        let (np, nd, nh) = (
            catalog.n_patients() as u32,
            catalog.n_doctors() as u32,
            catalog.n_hospitals() as u32,
        );
        for it in &interactions {
            if it.patient >= np || it.doctor >= nd || it.hospital >= nh {
                return Err(Error::InvalidParameter(
                    "interaction index outside catalog".into(),
                ));
            }
            if it.timestamp <= 0 {
                return Err(Error::InvalidParameter(format!(
                    "non-positive timestamp {}",
                    it.timestamp
                )));
            }
        }
        Ok(ConsultationDataset {
            catalog,
            interactions,
        })
    }

    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Self {
        ConsultationDataset {
            catalog: Arc::clone(&self.catalog),
            interactions,
        }
    }

    /// P, the size of the patient table.
    pub fn n_patients(&self) -> usize {
        self.catalog.n_patients()
    }

    /// L, the size of the doctor table.
    pub fn n_doctors(&self) -> usize {
        self.catalog.n_doctors()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Patients having at least one interaction, ascending.
    pub fn active_patients(&self) -> Vec<u32> {
        let set: HashSet<u32> = self.interactions.iter().map(|i| i.patient).collect();
        let mut v: Vec<u32> = set.into_iter().collect();
        v.sort_unstable();
        v
    }

    pub fn active_doctors(&self) -> Vec<u32> {
        let set: HashSet<u32> = self.interactions.iter().map(|i| i.doctor).collect();
        let mut v: Vec<u32> = set.into_iter().collect();
        v.sort_unstable();
        v
    }

    /// Interaction positions grouped by patient, each group sorted by timestamp
    /// (stable on file order).
    pub fn by_patient(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.interactions.iter().enumerate() {
            groups.entry(it.patient).or_default().push(i);
        }
        for idx in groups.values_mut() {
            idx.sort_by_key(|&i| self.interactions[i].timestamp);
        }
        groups
    }
}

/// Locations of the four CSV inputs.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub interactions: PathBuf,
    pub patients: PathBuf,
    pub doctors: PathBuf,
    pub hospitals: PathBuf,
}

impl DatasetFiles {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetFiles {
            interactions: dir.join("interactions.csv"),
            patients: dir.join("patients.csv"),
            doctors: dir.join("doctors.csv"),
            hospitals: dir.join("hospitals.csv"),
        }
    }
}

/// Reads a CSV file, checks its header, and hands each record with its line number to `f`.
fn read_csv(
    path: &Path,
    header: &[&str],
    mut f: impl FnMut(u64, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let found = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`", header.join(",")),
        ));
    }
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        f(line, &record)?;
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: u64, field: &str, s: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::parse(path, line, format!("invalid {field} `{s}`")))
}

fn parse_opt_location(path: &Path, line: u64, x: &str, y: &str) -> Result<Option<Location>> {
    match (x.is_empty(), y.is_empty()) {
        (true, true) => Ok(None),
        (false, false) => Ok(Some(Location::new(
            parse_num(path, line, "loc_x", x)?,
            parse_num(path, line, "loc_y", y)?,
        ))),
        _ => Err(Error::parse(path, line, "loc_x and loc_y must both be set or both empty")),
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split('|').map(str::trim).filter(|t| !t.is_empty())
}

pub fn load_dataset(paths: &DatasetFiles) -> Result<ConsultationDataset> {
    load_dataset_with_max_age(paths, DEFAULT_MAX_AGE)
}

pub fn load_dataset_with_max_age(
    paths: &DatasetFiles,
    max_age: u32,
) -> Result<ConsultationDataset> {
    let mut patients = Vec::new();
    read_csv(&paths.patients, &PATIENTS_HEADER, |line, r| {
        let path = &paths.patients;
        let sex = Sex::parse(&r[1]).ok_or_else(|| Error::parse(path, line, format!("invalid sex `{}`", &r[1])))?;
        patients.push(PatientMeta {
            id: r[0].to_string(),
            sex,
            age: parse_num(path, line, "age", &r[2])?,
            location: parse_opt_location(path, line, &r[3], &r[4])?,
        });
        Ok(())
    })?;

    let mut hospitals = Vec::new();
    read_csv(&paths.hospitals, &HOSPITALS_HEADER, |line, r| {
        let path = &paths.hospitals;
        hospitals.push(HospitalMeta {
            id: r[0].to_string(),
            location: Location::new(
                parse_num(path, line, "loc_x", &r[1])?,
                parse_num(path, line, "loc_y", &r[2])?,
            ),
        });
        Ok(())
    })?;

    let mut specialties: Vec<String> = Vec::new();
    let mut institutions: Vec<String> = Vec::new();
    let mut spec_ix: HashMap<String, u32> = HashMap::new();
    let mut inst_ix: HashMap<String, u32> = HashMap::new();
    let mut doctors = Vec::new();
    read_csv(&paths.doctors, &DOCTORS_HEADER, |line, r| {
        let path = &paths.doctors;
        let sex = Sex::parse(&r[1]).ok_or_else(|| Error::parse(path, line, format!("invalid sex `{}`", &r[1])))?;
        let intern = |name: &str, names: &mut Vec<String>, ix: &mut HashMap<String, u32>| {
            *ix.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() as u32 - 1
            })
        };
        let specs: Vec<u32> = split_list(&r[3])
            .map(|s| intern(s, &mut specialties, &mut spec_ix))
            .collect();
        if specs.is_empty() {
            return Err(Error::NoSpecialty(r[0].to_string()));
        }
        let insts: Vec<u32> = split_list(&r[4])
            .map(|s| intern(s, &mut institutions, &mut inst_ix))
            .collect();
        doctors.push(DoctorMeta {
            id: r[0].to_string(),
            sex,
            age: parse_num(path, line, "age", &r[2])?,
            specialties: dedup_keep_order(specs),
            institutions: dedup_keep_order(insts),
        });
        Ok(())
    })?;

    let catalog = Arc::new(Catalog::new(
        patients,
        doctors,
        hospitals,
        specialties,
        institutions,
        max_age,
    )?);

    let mut interactions = Vec::new();
    read_csv(&paths.interactions, &INTERACTIONS_HEADER, |line, r| {
        let path = &paths.interactions;
        let patient = catalog.patient_by_id(&r[0]).ok_or_else(|| Error::DanglingId {
            kind: "patient",
            id: r[0].to_string(),
        })?;
        let doctor = catalog.doctor_by_id(&r[1]).ok_or_else(|| Error::DanglingId {
            kind: "doctor",
            id: r[1].to_string(),
        })?;
        let hospital = catalog.hospital_by_id(&r[2]).ok_or_else(|| Error::DanglingId {
            kind: "hospital",
            id: r[2].to_string(),
        })?;
        let timestamp: i64 = parse_num(path, line, "timestamp", &r[3])?;
        if timestamp <= 0 {
            return Err(Error::parse(path, line, "timestamp must be positive"));
        }
        interactions.push(Interaction {
            patient,
            doctor,
            hospital,
            timestamp,
        });
        Ok(())
    })?;

    ConsultationDataset::new(catalog, interactions)
}

fn dedup_keep_order(v: Vec<u32>) -> Vec<u32> {
    let mut seen = HashSet::new();
    v.into_iter().filter(|x| seen.insert(*x)).collect()
}

fn fmt_opt_loc(loc: Option<Location>) -> (String, String) {
    match loc {
        Some(l) => (l.x.to_string(), l.y.to_string()),
        None => (String::new(), String::new()),
    }
}

/// Writes the four CSV files into `dir`. Output is a pure function of the dataset.
pub fn write_dataset(dataset: &ConsultationDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cat = &dataset.catalog;
    let paths = DatasetFiles::in_dir(dir);

    let mut w = BufWriter::new(File::create(&paths.patients)?);
    writeln!(w, "{}", PATIENTS_HEADER.join(","))?;
    for p in &cat.patients {
        let (x, y) = fmt_opt_loc(p.location);
        writeln!(w, "{},{},{},{},{}", p.id, p.sex.code(), p.age, x, y)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&paths.doctors)?);
    writeln!(w, "{}", DOCTORS_HEADER.join(","))?;
    for d in &cat.doctors {
        let specs: Vec<&str> = d.specialties.iter().map(|&s| cat.specialties[s as usize].as_str()).collect();
        let insts: Vec<&str> = d.institutions.iter().map(|&i| cat.institutions[i as usize].as_str()).collect();
        writeln!(w, "{},{},{},{},{}", d.id, d.sex.code(), d.age, specs.join("|"), insts.join("|"))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&paths.hospitals)?);
    writeln!(w, "{}", HOSPITALS_HEADER.join(","))?;
    for h in &cat.hospitals {
        writeln!(w, "{},{},{}", h.id, h.location.x, h.location.y)?;
    }
    w.flush()?;

    write_interactions(dataset, &paths.interactions)
}

pub fn write_interactions(dataset: &ConsultationDataset, path: &Path) -> Result<()> {
    let cat = &dataset.catalog;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", INTERACTIONS_HEADER.join(","))?;
    for it in &dataset.interactions {
        writeln!(
            w,
            "{},{},{},{}",
            cat.patients[it.patient as usize].id,
            cat.doctors[it.doctor as usize].id,
            cat.hospitals[it.hospital as usize].id,
            it.timestamp
        )?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Temporal split
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// No interactions at all.
    Absent,
    /// Every interaction is in train.
    TrainOnly,
    /// Interactions before the cutoff are in train, the rest in test_seen.
    Seen,
    /// Every interaction is in test_new.
    New,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub patient_id: String,
    pub assignment: Assignment,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cutoff: Option<i64>,
}

/// Audit record of a split; applying it to the same dataset reproduces the split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub test_fraction: f64,
    pub new_patient_fraction: f64,
    pub seed: u64,
    pub patients: Vec<PatientSplit>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: ConsultationDataset,
    pub test_seen: ConsultationDataset,
    pub test_new: ConsultationDataset,
    /// Indexed by patient.
    pub assignments: Vec<Assignment>,
    /// Per-patient cutoff `t` for patients with assignment [`Assignment::Seen`].
    pub cutoffs: BTreeMap<u32, i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PartitionCounts {
    pub interactions: usize,
    pub patients: usize,
    pub doctors: usize,
}

impl PartitionCounts {
    pub fn of(ds: &ConsultationDataset) -> Self {
        PartitionCounts {
            interactions: ds.interactions.len(),
            patients: ds.active_patients().len(),
            doctors: ds.active_doctors().len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SplitSummary {
    pub train: PartitionCounts,
    pub test_seen: PartitionCounts,
    pub test_new: PartitionCounts,
}

impl SplitSummary {
    pub fn test_fraction(&self) -> f64 {
        let test = self.test_seen.interactions + self.test_new.interactions;
        let total = test + self.train.interactions;
        if total == 0 {
            0.0
        } else {
            test as f64 / total as f64
        }
    }
}

impl std::fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<14}{:>12}{:>12}{:>12}", "", "Train", "Test seen", "Test new")?;
        type Getter = fn(&PartitionCounts) -> usize;
        let rows: [(&str, Getter); 3] = [
            ("Interactions", |c| c.interactions),
            ("Patients", |c| c.patients),
            ("Doctors", |c| c.doctors),
        ];
        for (name, get) in rows {
            writeln!(
                f,
                "{:<14}{:>12}{:>12}{:>12}",
                name,
                get(&self.train),
                get(&self.test_seen),
                get(&self.test_new)
            )?;
        }
        Ok(())
    }
}

impl SplitDataset {
    pub fn summary(&self) -> SplitSummary {
        SplitSummary {
            train: PartitionCounts::of(&self.train),
            test_seen: PartitionCounts::of(&self.test_seen),
            test_new: PartitionCounts::of(&self.test_new),
        }
    }

    pub fn manifest(&self, test_fraction: f64, new_patient_fraction: f64, seed: u64) -> SplitManifest {
        let cat = &self.train.catalog;
        SplitManifest {
            test_fraction,
            new_patient_fraction,
            seed,
            patients: self
                .assignments
                .iter()
                .enumerate()
                .map(|(p, &assignment)| PatientSplit {
                    patient_id: cat.patients[p].id.clone(),
                    assignment,
                    cutoff: self.cutoffs.get(&(p as u32)).copied(),
                })
                .collect(),
        }
    }
}

/// Splits by patient and time.
///
/// A seeded subset of multi-visit patients becomes "new" and is routed whole
/// to `test_new`. Each remaining multi-visit patient gets a cutoff near the
/// `(1 - adjusted)` quantile of its timestamps, where `adjusted` is chosen so
/// the overall test share approaches `test_fraction`. Interactions at or after
/// the cutoff go to `test_seen`. Single-visit patients stay in train.
pub fn temporal_split(
    dataset: &ConsultationDataset,
    test_fraction: f64,
    new_patient_fraction: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    if !(0.0..=1.0).contains(&new_patient_fraction) {
        return Err(Error::InvalidParameter(format!(
            "new_patient_fraction must be in [0, 1], got {new_patient_fraction}"
        )));
    }

    let groups = dataset.by_patient();
    let n_patients = dataset.n_patients();
    let mut assignments = vec![Assignment::Absent; n_patients];
    let mut cutoffs = BTreeMap::new();

    let mut candidates: Vec<u32> = groups
        .iter()
        .filter(|(_, idx)| idx.len() >= 2)
        .map(|(&p, _)| p)
        .collect();
    let n_new = (new_patient_fraction * candidates.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let new_set: HashSet<u32> = candidates[..n_new].iter().copied().collect();

    let total = dataset.interactions.len();
    let new_count: usize = new_set.iter().map(|p| groups[p].len()).sum();
    let eligible: usize = groups
        .iter()
        .filter(|(p, idx)| idx.len() >= 2 && !new_set.contains(p))
        .map(|(_, idx)| idx.len())
        .sum();
    let remaining = test_fraction * total as f64 - new_count as f64;
    let adjusted = if eligible == 0 {
        0.0
    } else {
        (remaining / eligible as f64).clamp(0.0, 1.0)
    };

    let mut carry = 0.0f64;
    for (&p, idx) in &groups {
        let n = idx.len();
        if new_set.contains(&p) {
            assignments[p as usize] = Assignment::New;
            continue;
        }
        assignments[p as usize] = Assignment::TrainOnly;
        if n < 2 {
            continue;
        }
        carry += adjusted * n as f64;
        let m = (carry.round().max(0.0) as usize).min(n - 1);
        if m == 0 {
            continue;
        }
        let ts: Vec<i64> = idx.iter().map(|&i| dataset.interactions[i].timestamp).collect();
        let first = ts[0];
        let cut = if ts[n - m] > first {
            Some(ts[n - m])
        } else {
            ts.iter().copied().find(|&t| t > first)
        };
        if let Some(t) = cut {
            let n_test = ts.iter().filter(|&&x| x >= t).count();
            carry -= n_test as f64;
            assignments[p as usize] = Assignment::Seen;
            cutoffs.insert(p, t);
        }
    }

    Ok(partition(dataset, assignments, cutoffs))
}

fn partition(
    dataset: &ConsultationDataset,
    assignments: Vec<Assignment>,
    cutoffs: BTreeMap<u32, i64>,
) -> SplitDataset {
    let mut train = Vec::new();
    let mut seen = Vec::new();
    let mut new = Vec::new();
    for it in &dataset.interactions {
        match assignments[it.patient as usize] {
            Assignment::New => new.push(*it),
            Assignment::Seen if it.timestamp >= cutoffs[&it.patient] => seen.push(*it),
            _ => train.push(*it),
        }
    }
    SplitDataset {
        train: dataset.with_interactions(train),
        test_seen: dataset.with_interactions(seen),
        test_new: dataset.with_interactions(new),
        assignments,
        cutoffs,
    }
}

/// Re-applies a saved split manifest to the dataset it was produced from.
pub fn apply_split_manifest(
    dataset: &ConsultationDataset,
    manifest: &SplitManifest,
) -> Result<SplitDataset> {
    let cat = &dataset.catalog;
    let mut assignments = vec![Assignment::Absent; cat.n_patients()];
    let mut cutoffs = BTreeMap::new();
    for ps in &manifest.patients {
        let p = cat.patient_by_id(&ps.patient_id).ok_or_else(|| Error::DanglingId {
            kind: "patient",
            id: ps.patient_id.clone(),
        })?;
        assignments[p as usize] = ps.assignment;
        if ps.assignment == Assignment::Seen {
            let t = ps.cutoff.ok_or_else(|| {
                Error::InvalidParameter(format!("seen patient `{}` has no cutoff", ps.patient_id))
            })?;
            cutoffs.insert(p, t);
        }
    }
    for it in &dataset.interactions {
        if assignments[it.patient as usize] == Assignment::Absent {
            return Err(Error::InvalidParameter(format!(
                "patient `{}` has interactions but is absent from the manifest",
                cat.patients[it.patient as usize].id
            )));
        }
    }
    Ok(partition(dataset, assignments, cutoffs))
}
