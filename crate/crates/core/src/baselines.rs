//! Reference recommenders: popularity, pairwise-ranking matrix factorization
//! and a hybrid factorization over the shared feature space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ConsultationDataset;
use crate::error::{Error, Result};
use crate::labels::{LabelMatrix, RatingMatrix};
use crate::ranking::{top_k, Query, RankedPrediction, Ranker};
use crate::sparse::{SparseMatrix, SparseVec};

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityModel {
    /// Train visits per doctor.
    pub counts: Vec<u64>,
    global: Vec<u32>,
    by_specialty: Vec<Vec<u32>>,
}

pub fn train_popularity(train: &ConsultationDataset) -> PopularityModel {
    let catalog = &train.catalog;
    let mut counts = vec![0u64; catalog.n_doctors()];
    for it in &train.interactions {
        counts[it.doctor as usize] += 1;
    }
    let mut global: Vec<u32> = (0..counts.len() as u32).collect();
    global.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let by_specialty = (0..catalog.specialties.len() as u32)
        .map(|s| {
            global
                .iter()
                .copied()
                .filter(|&d| catalog.doctors[d as usize].has_specialty(s))
                .collect()
        })
        .collect();
    PopularityModel {
        counts,
        global,
        by_specialty,
    }
}

impl PopularityModel {
    fn scored(&self, ranking: &[u32], k: usize) -> Vec<(u32, f32)> {
        ranking
            .iter()
            .take(k)
            .map(|&d| (d, self.counts[d as usize] as f32))
            .collect()
    }

    pub fn top_k(&self, k: usize) -> Vec<(u32, f32)> {
        self.scored(&self.global, k)
    }

    pub fn top_k_specialty(&self, specialty: u32, k: usize) -> Result<Vec<(u32, f32)>> {
        let ranking = self
            .by_specialty
            .get(specialty as usize)
            .ok_or_else(|| Error::UnknownSpecialty(specialty.to_string()))?;
        Ok(self.scored(ranking, k))
    }
}

impl Ranker for PopularityModel {
    fn rank(&self, query: &Query<'_>, k: usize) -> RankedPrediction {
        RankedPrediction {
            patient: query.patient,
            entries: self.top_k(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub factors: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub regularization: f32,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            factors: 32,
            epochs: 30,
            learning_rate: 0.05,
            regularization: 0.01,
            seed: 0,
        }
    }
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        check_rates(self.learning_rate, self.factors)?;
        if !(self.regularization.is_finite() && self.regularization >= 0.0) {
            return Err(Error::InvalidParameter("regularization must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub factors: usize,
    patient_factors: Vec<f32>,
    doctor_factors: Vec<f32>,
    doctor_bias: Vec<f32>,
    known: Vec<bool>,
}

fn positives_of(rows: &[Vec<u32>]) -> Vec<(u32, u32)> {
    rows.iter()
        .enumerate()
        .flat_map(|(p, row)| row.iter().map(move |&d| (p as u32, d)))
        .collect()
}

fn check_rates(lr: f32, factors: usize) -> Result<()> {
    if factors == 0 {
        return Err(Error::InvalidParameter("factors must be positive".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidParameter("learning_rate must be positive".into()));
    }
    Ok(())
}

/// Pairwise-ranking factorization of the positive entries of `ratings`.
pub fn train_mf(ratings: &RatingMatrix, config: &MfConfig) -> Result<MfModel> {
    config.validate()?;
    let rows: Vec<Vec<u32>> = ratings
        .rows
        .iter()
        .map(|r| r.iter().filter(|e| e.1 > 0.0).map(|e| e.0).collect())
        .collect();
    let positives = positives_of(&rows);
    if positives.is_empty() {
        return Err(Error::EmptyTrain);
    }
    let k = config.factors;
    let n_doctors = ratings.n_doctors as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 0.1;
    let mut u: Vec<f32> = (0..rows.len() * k).map(|_| rng.random_range(-scale..scale)).collect();
    let mut v: Vec<f32> = (0..n_doctors * k).map(|_| rng.random_range(-scale..scale)).collect();
    let mut b = vec![0.0f32; n_doctors];
    let (lr, reg) = (config.learning_rate, config.regularization);
    let mut diff = vec![0.0f32; k];
    for _ in 0..config.epochs {
        for _ in 0..positives.len() {
            let (p, i) = positives[rng.random_range(0..positives.len())];
            if rows[p as usize].len() == n_doctors {
                continue;
            }
            let j = loop {
                let j = rng.random_range(0..n_doctors as u32);
                if rows[p as usize].binary_search(&j).is_err() {
                    break j;
                }
            };
            let (p, i, j) = (p as usize, i as usize, j as usize);
            for f in 0..k {
                diff[f] = v[i * k + f] - v[j * k + f];
            }
            let x = dot(&u[p * k..(p + 1) * k], &diff) + b[i] - b[j];
            let g = sigmoid(-x);
            for f in 0..k {
                let uf = u[p * k + f];
                u[p * k + f] += lr * (g * diff[f] - reg * uf);
                v[i * k + f] += lr * (g * uf - reg * v[i * k + f]);
                v[j * k + f] += lr * (-g * uf - reg * v[j * k + f]);
            }
            b[i] += lr * (g - reg * b[i]);
            b[j] += lr * (-g - reg * b[j]);
        }
    }
    Ok(MfModel {
        factors: k,
        patient_factors: u,
        doctor_factors: v,
        doctor_bias: b,
        known: rows.iter().map(|r| !r.is_empty()).collect(),
    })
}

impl MfModel {
    pub fn n_doctors(&self) -> usize {
        self.doctor_bias.len()
    }

    pub fn is_known(&self, patient: u32) -> bool {
        self.known.get(patient as usize).copied().unwrap_or(false)
    }

    /// Full ranking truncated to `k`; empty for patients without train positives.
    pub fn predict_topk(&self, patient: u32, k: usize) -> Vec<(u32, f32)> {
        if !self.is_known(patient) {
            return Vec::new();
        }
        let f = self.factors;
        let up = &self.patient_factors[patient as usize * f..(patient as usize + 1) * f];
        let scored = (0..self.n_doctors())
            .map(|d| (d as u32, dot(up, &self.doctor_factors[d * f..(d + 1) * f]) + self.doctor_bias[d]))
            .collect();
        top_k(scored, k)
    }
}

impl Ranker for MfModel {
    fn rank(&self, query: &Query<'_>, k: usize) -> RankedPrediction {
        RankedPrediction {
            patient: query.patient,
            entries: self.predict_topk(query.patient, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub factors: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub max_sampled: usize,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            factors: 32,
            epochs: 20,
            learning_rate: 0.05,
            max_sampled: 10,
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        check_rates(self.learning_rate, self.factors)?;
        if self.max_sampled == 0 {
            return Err(Error::InvalidParameter("max_sampled must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridMfModel {
    pub factors: usize,
    pub n_features: u32,
    patient_table: Vec<f32>,
    doctor_table: Vec<f32>,
    doctor_bias: Vec<f32>,
    doctor_features: Vec<SparseVec>,
    #[serde(skip)]
    doctor_repr: Vec<f32>,
}

fn represent(table: &[f32], k: usize, x: &SparseVec, out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &(i, val) in &x.entries {
        for (o, &t) in out.iter_mut().zip(&table[i as usize * k..(i as usize + 1) * k]) {
            *o += val * t;
        }
    }
}

/// Per-coordinate AdaGrad step with accumulators starting at one.
fn adagrad(param: &mut f32, acc: &mut f32, grad: f32, lr: f32) {
    *param -= lr * grad / acc.sqrt();
    *acc += grad * grad;
}

fn adagrad_rows(table: &mut [f32], acc: &mut [f32], k: usize, x: &SparseVec, grad: &[f32], lr: f32) {
    for &(i, val) in &x.entries {
        let base = i as usize * k;
        for f in 0..k {
            adagrad(&mut table[base + f], &mut acc[base + f], val * grad[f], lr);
        }
    }
}

/// WARP-loss factorization where patients and doctors are sums of feature vectors.
pub fn train_hybrid_mf(
    x_p: &SparseMatrix,
    x_d: &SparseMatrix,
    y: &LabelMatrix,
    config: &HybridConfig,
) -> Result<HybridMfModel> {
    config.validate()?;
    if x_p.n_rows() != y.n_patients() || x_d.n_rows() != y.n_doctors as usize || x_p.n_cols != x_d.n_cols {
        return Err(Error::DimensionMismatch(format!(
            "patients {}x{}, doctors {}x{}, labels {}x{}",
            x_p.n_rows(),
            x_p.n_cols,
            x_d.n_rows(),
            x_d.n_cols,
            y.n_patients(),
            y.n_doctors
        )));
    }
    let mut positives = positives_of(&y.rows);
    if positives.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let k = config.factors;
    let n = x_p.n_cols as usize;
    let n_doctors = y.n_doctors as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut init = |len: usize| -> Vec<f32> { (0..len).map(|_| (rng.random::<f32>() - 0.5) / k as f32).collect() };
    let mut pt = init(n * k);
    let mut dt = init(n * k);
    let mut bias = vec![0.0f32; n_doctors];
    let mut pt_acc = vec![1.0f32; n * k];
    let mut dt_acc = vec![1.0f32; n * k];
    let mut bias_acc = vec![1.0f32; n_doctors];
    let lr = config.learning_rate;
    let (mut u, mut vi, mut vj) = (vec![0.0f32; k], vec![0.0f32; k], vec![0.0f32; k]);
    let (mut gu, mut gv) = (vec![0.0f32; k], vec![0.0f32; k]);
    for _ in 0..config.epochs {
        positives.shuffle(&mut rng);
        for &(p, i) in &positives {
            let xp = &x_p.rows[p as usize];
            let row = &y.rows[p as usize];
            represent(&pt, k, xp, &mut u);
            represent(&dt, k, &x_d.rows[i as usize], &mut vi);
            let s_i = dot(&u, &vi) + bias[i as usize];
            let mut sampled = 0usize;
            while sampled < config.max_sampled {
                sampled += 1;
                let j = rng.random_range(0..n_doctors as u32);
                if row.binary_search(&j).is_ok() {
                    continue;
                }
                represent(&dt, k, &x_d.rows[j as usize], &mut vj);
                let s_j = dot(&u, &vj) + bias[j as usize];
                if s_j > s_i - 1.0 {
                    let w = ((n_doctors.saturating_sub(1) / sampled) as f32).max(1.0).ln();
                    for f in 0..k {
                        gu[f] = w * (vj[f] - vi[f]);
                    }
                    adagrad_rows(&mut pt, &mut pt_acc, k, xp, &gu, lr);
                    for f in 0..k {
                        gv[f] = -w * u[f];
                    }
                    adagrad_rows(&mut dt, &mut dt_acc, k, &x_d.rows[i as usize], &gv, lr);
                    gv.iter_mut().for_each(|g| *g = -*g);
                    adagrad_rows(&mut dt, &mut dt_acc, k, &x_d.rows[j as usize], &gv, lr);
                    adagrad(&mut bias[i as usize], &mut bias_acc[i as usize], -w, lr);
                    adagrad(&mut bias[j as usize], &mut bias_acc[j as usize], w, lr);
                    break;
                }
            }
        }
    }
    let mut model = HybridMfModel {
        factors: k,
        n_features: x_p.n_cols,
        patient_table: pt,
        doctor_table: dt,
        doctor_bias: bias,
        doctor_features: x_d.rows.clone(),
        doctor_repr: Vec::new(),
    };
    model.refresh();
    Ok(model)
}

impl HybridMfModel {
    pub(crate) fn refresh(&mut self) {
        let k = self.factors;
        let mut repr = vec![0.0; self.doctor_features.len() * k];
        for (d, x) in self.doctor_features.iter().enumerate() {
            represent(&self.doctor_table, k, x, &mut repr[d * k..(d + 1) * k]);
        }
        self.doctor_repr = repr;
    }

    pub fn n_doctors(&self) -> usize {
        self.doctor_bias.len()
    }

    pub fn patient_representation(&self, x: &SparseVec) -> Vec<f32> {
        let mut u = vec![0.0; self.factors];
        represent(&self.patient_table, self.factors, x, &mut u);
        u
    }

    pub fn scores(&self, x: &SparseVec) -> Vec<f32> {
        let u = self.patient_representation(x);
        let k = self.factors;
        (0..self.n_doctors())
            .map(|d| dot(&u, &self.doctor_repr[d * k..(d + 1) * k]) + self.doctor_bias[d])
            .collect()
    }

    pub fn predict_topk(&self, x: &SparseVec, k: usize) -> Vec<(u32, f32)> {
        let scored = self.scores(x).into_iter().enumerate().map(|(d, s)| (d as u32, s)).collect();
        top_k(scored, k)
    }

    pub fn doctor_bias(&self) -> &[f32] {
        &self.doctor_bias
    }
}

impl Ranker for HybridMfModel {
    fn rank(&self, query: &Query<'_>, k: usize) -> RankedPrediction {
        RankedPrediction {
            patient: query.patient,
            entries: self.predict_topk(query.features, k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratings(rows: Vec<Vec<(u32, f64)>>, n_doctors: u32) -> RatingMatrix {
        RatingMatrix { n_doctors, rows }
    }

    #[test]
    fn mf_separable_and_cold_start() {
        let r = ratings(vec![vec![(1, 1.0)], vec![]], 2);
        let m = train_mf(&r, &MfConfig { epochs: 200, ..MfConfig::default() }).unwrap();
        assert_eq!(m.predict_topk(0, 2)[0].0, 1);
        assert!(m.predict_topk(1, 2).is_empty());
        assert!(m.predict_topk(7, 2).is_empty());
        assert!(train_mf(&ratings(vec![vec![]], 2), &MfConfig::default()).is_err());
    }

    #[test]
    fn mf_deterministic() {
        let r = ratings(vec![vec![(0, 1.0)], vec![(1, 0.5), (2, 0.5)], vec![(2, 1.0)]], 4);
        let c = MfConfig { seed: 5, ..MfConfig::default() };
        assert_eq!(train_mf(&r, &c).unwrap(), train_mf(&r, &c).unwrap());
    }

    #[test]
    fn hybrid_zero_features_rank_by_bias() {
        let xp = SparseMatrix::from_rows(
            2,
            vec![SparseVec::from_pairs(2, vec![(0, 1.0)]).unwrap(), SparseVec::from_pairs(2, vec![(1, 1.0)]).unwrap()],
        )
        .unwrap();
        let xd = SparseMatrix::from_rows(2, vec![SparseVec::from_pairs(2, vec![(0, 1.0)]).unwrap(); 3]).unwrap();
        let y = LabelMatrix::from_rows(3, vec![vec![2], vec![2, 1]]).unwrap();
        let m = train_hybrid_mf(&xp, &xd, &y, &HybridConfig::default()).unwrap();
        let got = m.predict_topk(&SparseVec::zeros(2), 3);
        let mut by_bias: Vec<(u32, f32)> = m.doctor_bias().iter().enumerate().map(|(d, &b)| (d as u32, b)).collect();
        by_bias.sort_by(crate::ranking::rank_order);
        assert_eq!(got, by_bias);
        let bad = LabelMatrix::from_rows(3, vec![vec![2]]).unwrap();
        assert!(train_hybrid_mf(&xp, &xd, &bad, &HybridConfig::default()).is_err());
    }
}
