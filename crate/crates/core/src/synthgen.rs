//! Seeded synthetic consultation logs.
//!
//! Doctors carry Zipf-like popularity, work at one to three hospitals near
//! their home coordinates and attended one or two institutions (the first one
//! close to home). Each patient has a primary specialty; every visit either
//! returns to it or draws a specialty by overall demand, then picks a doctor of
//! that specialty by popularity blended with proximity, or revisits a doctor
//! already seen in that specialty.
//!
//! The distribution shapes are assumptions: only their qualitative features
//! (heavy-tailed doctor popularity, uneven hospital load, a sex-restricted
//! specialty) are meant to resemble real referral data.

use std::collections::HashMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Catalog, ConsultationDataset, DoctorMeta, HospitalMeta, Interaction, Location, PatientMeta, Sex,
    DEFAULT_MAX_AGE,
};
use crate::error::{Error, Result};

const SPECIALTY_NAMES: [&str; 5] = ["IM", "OPH", "OBGYN", "PED", "ORS"];

/// Negative-binomial visit counts parameterized by mean and dispersion
/// (variance = mean + dispersion * mean^2). Dispersion 0 gives Poisson counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitDistribution {
    pub mean: f64,
    pub dispersion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_doctors: usize,
    pub n_hospitals: usize,
    pub n_specialties: usize,
    pub n_institutions: usize,
    /// Zipf exponent of doctor popularity by rank.
    pub doctor_popularity_exponent: f64,
    pub visits_per_patient: VisitDistribution,
    /// Probability that a visit returns to a doctor the patient already saw in the same specialty.
    pub repeat_visit_affinity: f64,
    pub female_fraction: f64,
    /// Specialty visited by female patients only.
    pub sex_restricted_specialty: Option<usize>,
    /// Side of the square region, in km.
    pub geography_scale: f64,
    /// Span of visit timestamps, in seconds.
    pub time_horizon: i64,
    pub start_time: i64,
    /// Probability that a visit goes to the patient's primary specialty.
    pub specialty_focus: f64,
    /// Weight of proximity against popularity when picking a doctor, in [0, 1].
    pub distance_affinity: f64,
    /// Length scale (km) of the proximity kernel `exp(-d / decay)`.
    pub distance_decay: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 5000,
            n_doctors: 100,
            n_hospitals: 16,
            n_specialties: 5,
            n_institutions: 12,
            doctor_popularity_exponent: 1.0,
            visits_per_patient: VisitDistribution {
                mean: 8.0,
                dispersion: 0.5,
            },
            repeat_visit_affinity: 0.5,
            female_fraction: 0.6,
            sex_restricted_specialty: Some(2),
            geography_scale: 60.0,
            time_horizon: 3 * 365 * 24 * 3600,
            start_time: 1_577_836_800,
            specialty_focus: 0.7,
            distance_affinity: 1.0,
            distance_decay: 5.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        for (name, v) in [
            ("n_patients", self.n_patients),
            ("n_doctors", self.n_doctors),
            ("n_hospitals", self.n_hospitals),
            ("n_specialties", self.n_specialties),
            ("n_institutions", self.n_institutions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_doctors < self.n_specialties {
            return bad("n_doctors must be at least n_specialties".into());
        }
        if !(self.doctor_popularity_exponent > 0.0 && self.doctor_popularity_exponent.is_finite()) {
            return bad("doctor_popularity_exponent must be positive".into());
        }
        let v = &self.visits_per_patient;
        if !(v.mean >= 0.0 && v.mean.is_finite() && v.dispersion >= 0.0 && v.dispersion.is_finite()) {
            return bad("visits_per_patient mean and dispersion must be non-negative".into());
        }
        for (name, p) in [
            ("repeat_visit_affinity", self.repeat_visit_affinity),
            ("female_fraction", self.female_fraction),
            ("specialty_focus", self.specialty_focus),
            ("distance_affinity", self.distance_affinity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if let Some(s) = self.sex_restricted_specialty {
            if s >= self.n_specialties {
                return bad("sex_restricted_specialty out of range".into());
            }
            if self.n_specialties == 1 {
                return bad("a sex-restricted specialty needs at least one other specialty".into());
            }
        }
        if !(self.geography_scale > 0.0 && self.distance_decay > 0.0) {
            return bad("geography_scale and distance_decay must be positive".into());
        }
        if self.time_horizon <= 0 || self.start_time <= 0 {
            return bad("time_horizon and start_time must be positive".into());
        }
        Ok(())
    }
}

struct Doctor {
    weight: f64,
    specialty: usize,
    /// (hospital, share); shares sum to one.
    hospitals: Vec<(u32, f64)>,
}

fn uniform_location(rng: &mut ChaCha8Rng, scale: f64) -> Location {
    Location::new(rng.random::<f64>() * scale, rng.random::<f64>() * scale)
}

fn round_km(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<ConsultationDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = config.geography_scale;
    let decay = config.distance_decay;

    let hospitals: Vec<HospitalMeta> = (0..config.n_hospitals)
        .map(|h| {
            let loc = uniform_location(&mut rng, scale);
            HospitalMeta {
                id: format!("h{h}"),
                location: Location::new(round_km(loc.x), round_km(loc.y)),
            }
        })
        .collect();
    let institution_locs: Vec<Location> = (0..config.n_institutions)
        .map(|_| uniform_location(&mut rng, scale))
        .collect();

    let specialties: Vec<String> = (0..config.n_specialties)
        .map(|s| match (config.n_specialties, SPECIALTY_NAMES.get(s)) {
            (5, Some(name)) => name.to_string(),
            _ => format!("spec{s}"),
        })
        .collect();
    let institutions: Vec<String> = (0..config.n_institutions).map(|i| format!("inst{i}")).collect();

    // Doctor index order is independent of popularity rank.
    let mut rank_order: Vec<usize> = (0..config.n_doctors).collect();
    rank_order.shuffle(&mut rng);
    let mut doctors = Vec::with_capacity(config.n_doctors);
    let mut doctor_meta = Vec::with_capacity(config.n_doctors);
    for (d, &rank) in rank_order.iter().enumerate() {
        let home = uniform_location(&mut rng, scale);
        let mut by_dist: Vec<(u32, f64)> = hospitals
            .iter()
            .enumerate()
            .map(|(h, hm)| (h as u32, home.distance(&hm.location)))
            .collect();
        by_dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let n_h = rng.random_range(1..=3usize).min(hospitals.len());
        let raw: Vec<f64> = (0..n_h).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let doctor_hospitals = by_dist[..n_h]
            .iter()
            .zip(&raw)
            .map(|(&(h, _), &w)| (h, w / total))
            .collect();

        let inst_weights: Vec<f64> = institution_locs
            .iter()
            .map(|l| (-home.distance(l) / decay).exp() + 1e-9)
            .collect();
        let first = WeightedIndex::new(&inst_weights)
            .expect("positive weights")
            .sample(&mut rng) as u32;
        let mut insts = vec![first];
        if config.n_institutions > 1 && rng.random_bool(0.4) {
            let second = rng.random_range(0..config.n_institutions) as u32;
            if second != first {
                insts.push(second);
            }
        }

        let specialty = rank % config.n_specialties;
        doctors.push(Doctor {
            weight: ((rank + 1) as f64).powf(-config.doctor_popularity_exponent),
            specialty,
            hospitals: doctor_hospitals,
        });
        doctor_meta.push(DoctorMeta {
            id: format!("d{d}"),
            sex: if rng.random_bool(0.5) { Sex::Female } else { Sex::Male },
            age: rng.random_range(28..=70),
            specialties: vec![specialty as u32],
            institutions: insts,
        });
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.n_specialties];
    for (d, doc) in doctors.iter().enumerate() {
        members[doc.specialty].push(d);
    }
    let demand: Vec<f64> = members
        .iter()
        .map(|m| m.iter().map(|&d| doctors[d].weight).sum())
        .collect();
    let demand_for = |sex: Sex| -> WeightedIndex<f64> {
        let w: Vec<f64> = demand
            .iter()
            .enumerate()
            .map(|(s, &v)| match (config.sex_restricted_specialty, sex) {
                (Some(r), Sex::Male) if r == s => 0.0,
                _ => v,
            })
            .collect();
        WeightedIndex::new(&w).expect("some specialty is open to every sex")
    };
    let demand_female = demand_for(Sex::Female);
    let demand_male = demand_for(Sex::Male);

    let visit_counts = visit_sampler(&config.visits_per_patient);

    let mut patients = Vec::with_capacity(config.n_patients);
    let mut interactions = Vec::new();
    for p in 0..config.n_patients {
        let sex = if rng.random_bool(config.female_fraction) {
            Sex::Female
        } else {
            Sex::Male
        };
        let loc = uniform_location(&mut rng, scale);
        let loc = Location::new(round_km(loc.x), round_km(loc.y));
        patients.push(PatientMeta {
            id: format!("p{p}"),
            sex,
            age: rng.random_range(0..=90),
            location: Some(loc),
        });
        let demand = if sex == Sex::Female { &demand_female } else { &demand_male };
        let primary = demand.sample(&mut rng);
        let n_visits = visit_counts.sample(&mut rng);

        let mut times: Vec<i64> = (0..n_visits)
            .map(|_| config.start_time + rng.random_range(0..config.time_horizon))
            .collect();
        times.sort_unstable();

        let mut history: HashMap<usize, Vec<(usize, u32)>> = HashMap::new();
        for t in times {
            let spec = if rng.random_bool(config.specialty_focus) {
                primary
            } else {
                demand.sample(&mut rng)
            };
            let seen = history.entry(spec).or_default();
            let doctor = if !seen.is_empty() && rng.random_bool(config.repeat_visit_affinity) {
                let w: Vec<u32> = seen.iter().map(|&(_, c)| c).collect();
                seen[WeightedIndex::new(&w).expect("counts positive").sample(&mut rng)].0
            } else {
                let w: Vec<f64> = members[spec]
                    .iter()
                    .map(|&d| {
                        let prox: f64 = doctors[d]
                            .hospitals
                            .iter()
                            .map(|&(h, share)| {
                                share * (-loc.distance(&hospitals[h as usize].location) / decay).exp()
                            })
                            .sum();
                        doctors[d].weight
                            * ((1.0 - config.distance_affinity) + config.distance_affinity * prox)
                    })
                    .collect();
                members[spec][WeightedIndex::new(&w).expect("weights positive").sample(&mut rng)]
            };
            match seen.iter_mut().find(|(d, _)| *d == doctor) {
                Some(entry) => entry.1 += 1,
                None => seen.push((doctor, 1)),
            }
            let w: Vec<f64> = doctors[doctor]
                .hospitals
                .iter()
                .map(|&(h, share)| {
                    share * (-loc.distance(&hospitals[h as usize].location) / decay).exp() + 1e-12
                })
                .collect();
            let hospital = doctors[doctor].hospitals
                [WeightedIndex::new(&w).expect("weights positive").sample(&mut rng)]
            .0;
            interactions.push(Interaction {
                patient: p as u32,
                doctor: doctor as u32,
                hospital,
                timestamp: t,
            });
        }
    }

    let (specialties, institutions) = first_appearance_order(&mut doctor_meta, specialties, institutions);
    let catalog = Catalog::new(
        patients,
        doctor_meta,
        hospitals,
        specialties,
        institutions,
        DEFAULT_MAX_AGE,
    )?;
    ConsultationDataset::new(Arc::new(catalog), interactions)
}

/// Renumbers specialties and institutions by first appearance in the doctor
/// table, which is the order `load_dataset` assigns when reading the CSV back.
fn first_appearance_order(
    doctors: &mut [DoctorMeta],
    specialties: Vec<String>,
    institutions: Vec<String>,
) -> (Vec<String>, Vec<String>) {
    fn remap(names: &[String], ids: &mut [u32], map: &mut HashMap<u32, u32>, out: &mut Vec<String>) {
        for id in ids {
            let next = map.len() as u32;
            let new = *map.entry(*id).or_insert_with(|| {
                out.push(names[*id as usize].clone());
                next
            });
            *id = new;
        }
    }
    let (mut spec_map, mut inst_map) = (HashMap::new(), HashMap::new());
    let (mut spec_out, mut inst_out) = (Vec::new(), Vec::new());
    for d in doctors.iter_mut() {
        remap(&specialties, &mut d.specialties, &mut spec_map, &mut spec_out);
        remap(&institutions, &mut d.institutions, &mut inst_map, &mut inst_out);
    }
    (spec_out, inst_out)
}

enum VisitSampler {
    Zero,
    Poisson(Poisson<f64>),
    Mixture(Gamma<f64>),
}

impl VisitSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            VisitSampler::Zero => 0,
            VisitSampler::Poisson(p) => p.sample(rng) as usize,
            VisitSampler::Mixture(g) => {
                let lambda = g.sample(rng);
                if lambda <= 0.0 {
                    0
                } else {
                    Poisson::new(lambda).map_or(0, |p| p.sample(rng) as usize)
                }
            }
        }
    }
}

fn visit_sampler(v: &VisitDistribution) -> VisitSampler {
    if v.mean <= 0.0 {
        VisitSampler::Zero
    } else if v.dispersion <= 0.0 {
        VisitSampler::Poisson(Poisson::new(v.mean).expect("positive mean"))
    } else {
        let shape = 1.0 / v.dispersion;
        VisitSampler::Mixture(Gamma::new(shape, v.mean / shape).expect("positive parameters"))
    }
}

/// Least-squares slope of log(count) against log(rank) over doctors with at least one visit.
pub fn rank_frequency_slope(dataset: &ConsultationDataset) -> Option<f64> {
    let mut counts = vec![0usize; dataset.n_doctors()];
    for it in &dataset.interactions {
        counts[it.doctor as usize] += 1;
    }
    let mut counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    if counts.len() < 2 {
        return None;
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .map(|(r, &c)| (((r + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_patients: 300,
            n_doctors: 20,
            n_hospitals: 4,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn zero_mean_visits_gives_no_interactions() {
        let cfg = GeneratorConfig {
            n_patients: 1,
            visits_per_patient: VisitDistribution { mean: 0.0, dispersion: 0.5 },
            ..small()
        };
        let ds = generate(&cfg, 1).unwrap();
        assert_eq!(ds.n_patients(), 1);
        assert!(ds.interactions.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let too_few_doctors = GeneratorConfig { n_doctors: 3, n_specialties: 5, ..small() };
        assert!(generate(&too_few_doctors, 0).is_err());
        let bad_prob = GeneratorConfig { repeat_visit_affinity: 1.5, ..small() };
        assert!(generate(&bad_prob, 0).is_err());
        let bad_restricted = GeneratorConfig { sex_restricted_specialty: Some(9), ..small() };
        assert!(generate(&bad_restricted, 0).is_err());
    }

    #[test]
    fn restricted_specialty_sees_only_female_patients() {
        let ds = generate(&small(), 11).unwrap();
        let cat = &ds.catalog;
        let restricted = cat.specialty_by_id("OBGYN").unwrap();
        let mut hits = 0;
        for it in &ds.interactions {
            if cat.doctors[it.doctor as usize].has_specialty(restricted) {
                hits += 1;
                assert_eq!(cat.patients[it.patient as usize].sex, Sex::Female);
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn visits_stay_at_the_doctors_hospitals() {
        let ds = generate(&small(), 5).unwrap();
        let mut seen: HashMap<u32, std::collections::HashSet<u32>> = HashMap::new();
        for it in &ds.interactions {
            seen.entry(it.doctor).or_default().insert(it.hospital);
        }
        assert!(seen.values().all(|h| h.len() <= 3));
    }

    #[test]
    fn every_specialty_staffed() {
        let ds = generate(&small(), 2).unwrap();
        for s in 0..5 {
            assert!(!ds.catalog.doctors_with_specialty(s).is_empty());
        }
    }
}
