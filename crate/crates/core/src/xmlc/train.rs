use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::embed_into;
use super::{cluster_labels, dot, sigmoid, TrainConfig, XmlModel};
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::sparse::{SparseMatrix, SparseVec};

const INIT_SCALE: f32 = 0.3;
const REFINE_INIT: f32 = 0.01;
const CLIP_NORM: f32 = 5.0;

/// Row-sparse gradient accumulator over a `rows x width` parameter block.
struct Grad {
    width: usize,
    data: Vec<f32>,
    touched: Vec<u32>,
    mark: Vec<bool>,
}

impl Grad {
    fn new(rows: usize, width: usize) -> Self {
        Grad {
            width,
            data: vec![0.0; rows * width],
            touched: Vec::new(),
            mark: vec![false; rows],
        }
    }

    fn row(&mut self, i: u32) -> &mut [f32] {
        let i = i as usize;
        if !self.mark[i] {
            self.mark[i] = true;
            self.touched.push(i as u32);
        }
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    fn sq_norm(&self) -> f32 {
        self.touched
            .iter()
            .map(|&i| {
                let r = &self.data[i as usize * self.width..(i as usize + 1) * self.width];
                dot(r, r)
            })
            .sum()
    }

    /// `params -= step * grad`, then clears.
    fn apply(&mut self, params: &mut [f32], step: f32) {
        let w = self.width;
        for &i in &self.touched {
            let i = i as usize;
            for (p, g) in params[i * w..(i + 1) * w].iter_mut().zip(&mut self.data[i * w..(i + 1) * w]) {
                *p -= step * *g;
                *g = 0.0;
            }
            self.mark[i] = false;
        }
        self.touched.clear();
    }
}

fn clip_factor(grads: &[&Grad], batch: usize) -> f32 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f32>().sqrt() / batch as f32;
    if norm > CLIP_NORM {
        CLIP_NORM / norm
    } else {
        1.0
    }
}

/// Backpropagates `dh` through the rectifier into the rows of `x`.
fn backprop_embedding(grad: &mut Grad, x: &SparseVec, h: &[f32], dh: &[f32]) {
    for &(i, v) in &x.entries {
        let row = grad.row(i);
        for ((r, &hj), &g) in row.iter_mut().zip(h).zip(dh) {
            if hj > 0.0 {
                *r += v * g;
            }
        }
    }
}

fn normalized_dense(x: &SparseVec) -> Vec<f32> {
    let mut v = x.to_dense();
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|e| *e /= n);
    }
    v
}

/// Unit label features, falling back to the centroid of the label's training rows.
fn label_representations(x_p: &SparseMatrix, x_d: &SparseMatrix, y: &LabelMatrix) -> Vec<Vec<f32>> {
    let n = x_d.n_cols as usize;
    let mut centroid: Vec<Option<Vec<f32>>> = vec![None; x_d.n_rows()];
    for (row, labels) in x_p.rows.iter().zip(&y.rows) {
        for &l in labels {
            if !x_d.rows[l as usize].is_zero() {
                continue;
            }
            let c = centroid[l as usize].get_or_insert_with(|| vec![0.0; n]);
            for &(i, v) in &row.entries {
                c[i as usize] += v;
            }
        }
    }
    x_d.rows
        .iter()
        .zip(centroid)
        .map(|(row, c)| {
            if row.is_zero() {
                let mut c = c.unwrap_or_else(|| vec![0.0; n]);
                let norm = dot(&c, &c).sqrt();
                if norm > 0.0 {
                    c.iter_mut().for_each(|e| *e /= norm);
                }
                c
            } else {
                normalized_dense(row)
            }
        })
        .collect()
}

struct LabelCache {
    stamp: Vec<u64>,
    unit: Vec<Option<(Vec<f32>, f32)>>,
    w: Vec<Vec<f32>>,
}

impl LabelCache {
    fn new(n_labels: usize) -> Self {
        LabelCache {
            stamp: vec![u64::MAX; n_labels],
            unit: vec![None; n_labels],
            w: vec![Vec::new(); n_labels],
        }
    }

    /// Classifier of `l` under the current parameters, computed once per batch.
    fn classifier(&mut self, model: &XmlModel, l: u32, batch: u64) -> &[f32] {
        let li = l as usize;
        if self.stamp[li] != batch {
            self.stamp[li] = batch;
            let d = model.dim();
            let x = &model.label_features[li];
            let z = &model.refine[li * d..(li + 1) * d];
            let mut e = vec![0.0; d];
            embed_into(&model.embedding, d, x, &mut e);
            let norm = dot(&e, &e).sqrt();
            if x.is_zero() || norm <= 0.0 || !norm.is_finite() {
                self.unit[li] = None;
                self.w[li] = z.to_vec();
            } else {
                e.iter_mut().for_each(|v| *v /= norm);
                let g = sigmoid(model.gate[li]);
                self.w[li] = e.iter().zip(z).map(|(&ej, &zj)| g * ej + (1.0 - g) * zj).collect();
                self.unit[li] = Some((e, norm));
            }
        }
        &self.w[li]
    }
}

/// Two-phase training: tree scorers with a routing embedding, then per-label
/// classifiers with a fine-tuned copy of the embedding.
pub fn train(x_p: &SparseMatrix, x_d: &SparseMatrix, y: &LabelMatrix, config: &TrainConfig) -> Result<XmlModel> {
    config.validate()?;
    if x_p.n_rows() != y.n_patients() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} label rows",
            x_p.n_rows(),
            y.n_patients()
        )));
    }
    if x_d.n_rows() != y.n_doctors as usize {
        return Err(Error::DimensionMismatch(format!(
            "{} doctor feature rows for {} labels",
            x_d.n_rows(),
            y.n_doctors
        )));
    }
    if x_p.n_cols != x_d.n_cols {
        return Err(Error::DimensionMismatch(format!(
            "patient features have {} columns, doctor features {}",
            x_p.n_cols, x_d.n_cols
        )));
    }
    if y.nnz() == 0 {
        return Err(Error::EmptyLabels);
    }
    let d = config.embedding_dim;
    let n = x_p.n_cols as usize;
    let n_labels = y.n_doctors as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let reps = label_representations(x_p, x_d, y);
    let tree = cluster_labels(&reps, config.b_factors, rng.random())?;
    let n_nodes = tree.n_nodes();
    let paths: Vec<Vec<u32>> = (0..n_labels as u32).map(|l| tree.path(l)).collect();
    let points: Vec<usize> = (0..y.n_patients()).filter(|&p| !y.rows[p].is_empty()).collect();

    let mut route: Vec<f32> = (0..n * d).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect();
    let mut node_w = vec![0.0f32; n_nodes * d];
    let mut node_b = vec![0.0f32; n_nodes];

    let mut g_route = Grad::new(n, d);
    let mut g_node_w = Grad::new(n_nodes, d);
    let mut g_node_b = Grad::new(n_nodes, 1);
    let mut node_stamp = vec![usize::MAX; n_nodes];
    let mut order = points.clone();
    let mut h = vec![0.0f32; d];
    let mut dh = vec![0.0f32; d];
    let mut tick = 0usize;
    for _ in 0..config.tree_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for &p in batch {
                tick += 1;
                let x = &x_p.rows[p];
                embed_into(&route, d, x, &mut h);
                dh.iter_mut().for_each(|v| *v = 0.0);
                let mut positive = Vec::new();
                for &l in &y.rows[p] {
                    for &node in &paths[l as usize] {
                        if node_stamp[node as usize] != tick {
                            node_stamp[node as usize] = tick;
                            positive.push(node);
                        }
                    }
                }
                let mut targets: Vec<(u32, f32)> = positive.iter().map(|&v| (v, 1.0)).collect();
                for &v in &positive {
                    if let Some(s) = tree.sibling(v) {
                        if node_stamp[s as usize] != tick {
                            targets.push((s, 0.0));
                        }
                    }
                }
                for (v, target) in targets {
                    let vi = v as usize;
                    let wv = &node_w[vi * d..(vi + 1) * d];
                    let g = sigmoid(dot(wv, &h) + node_b[vi]) - target;
                    for (a, &b) in dh.iter_mut().zip(wv) {
                        *a += g * b;
                    }
                    for (a, &b) in g_node_w.row(v).iter_mut().zip(&h) {
                        *a += g * b;
                    }
                    g_node_b.row(v)[0] += g;
                }
                backprop_embedding(&mut g_route, x, &h, &dh);
            }
            let step = config.learning_rate * clip_factor(&[&g_route, &g_node_w, &g_node_b], batch.len())
                / batch.len() as f32;
            g_route.apply(&mut route, step);
            g_node_w.apply(&mut node_w, step);
            g_node_b.apply(&mut node_b, step);
        }
    }

    let refine: Vec<f32> = (0..n_labels * d).map(|_| rng.random_range(-REFINE_INIT..REFINE_INIT)).collect();
    let mut model = XmlModel::from_parts(
        config.clone(),
        x_p.n_cols,
        route.clone(),
        route,
        tree,
        node_w,
        node_b,
        vec![0.0; n_labels],
        refine,
        x_d.rows.clone(),
    );
    let shortlists: Vec<Vec<u32>> = (0..y.n_patients())
        .map(|p| if y.rows[p].is_empty() { Vec::new() } else { model.shortlist(&x_p.rows[p]) })
        .collect();

    let mut g_emb = Grad::new(n, d);
    let mut g_w = Grad::new(n_labels, d);
    let mut g_z = Grad::new(n_labels, d);
    let mut g_a = Grad::new(n_labels, 1);
    let mut cache = LabelCache::new(n_labels);
    let mut label_stamp = vec![usize::MAX; n_labels];
    let mut batch_id = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            batch_id += 1;
            for &p in batch {
                tick += 1;
                let x = &x_p.rows[p];
                embed_into(&model.embedding, d, x, &mut h);
                dh.iter_mut().for_each(|v| *v = 0.0);
                let mut targets: Vec<(u32, f32)> = Vec::new();
                for &l in &y.rows[p] {
                    label_stamp[l as usize] = tick;
                    targets.push((l, 1.0));
                }
                for &l in &shortlists[p] {
                    if label_stamp[l as usize] != tick {
                        label_stamp[l as usize] = tick;
                        targets.push((l, 0.0));
                    }
                }
                for _ in 0..config.negatives_per_positive * y.rows[p].len() {
                    let l = rng.random_range(0..n_labels as u32);
                    if label_stamp[l as usize] != tick {
                        label_stamp[l as usize] = tick;
                        targets.push((l, 0.0));
                    }
                }
                for (l, target) in targets {
                    let w = cache.classifier(&model, l, batch_id);
                    let g = sigmoid(dot(w, &h)) - target;
                    for (a, &b) in dh.iter_mut().zip(w) {
                        *a += g * b;
                    }
                    for (a, &b) in g_w.row(l).iter_mut().zip(&h) {
                        *a += g * b;
                    }
                }
                backprop_embedding(&mut g_emb, x, &h, &dh);
            }
            for k in 0..g_w.touched.len() {
                let l = g_w.touched[k] as usize;
                let dw = g_w.data[l * d..(l + 1) * d].to_vec();
                match &cache.unit[l] {
                    None => {
                        for (a, b) in g_z.row(l as u32).iter_mut().zip(&dw) {
                            *a += b;
                        }
                    }
                    Some((e, norm)) => {
                        let s = sigmoid(model.gate[l]);
                        let z = &model.refine[l * d..(l + 1) * d];
                        for (a, b) in g_z.row(l as u32).iter_mut().zip(&dw) {
                            *a += (1.0 - s) * b;
                        }
                        let diff: f32 = e.iter().zip(z).zip(&dw).map(|((&ej, &zj), &g)| (ej - zj) * g).sum();
                        g_a.row(l as u32)[0] += s * (1.0 - s) * diff;
                        let de: Vec<f32> = dw.iter().map(|&g| s * g).collect();
                        let proj = dot(e, &de);
                        let du: Vec<f32> = de.iter().zip(e).map(|(&g, &ej)| (g - ej * proj) / norm).collect();
                        backprop_embedding(&mut g_emb, &model.label_features[l], e, &du);
                    }
                }
            }
            let step =
                config.learning_rate * clip_factor(&[&g_emb, &g_z, &g_a], batch.len()) / batch.len() as f32;
            clear_grad(&mut g_w);
            g_emb.apply(&mut model.embedding, step);
            g_z.apply(&mut model.refine, step);
            g_a.apply(&mut model.gate, step);
        }
    }
    model.refresh_classifiers();
    Ok(model)
}

fn clear_grad(g: &mut Grad) {
    let w = g.width;
    for &i in &g.touched {
        let i = i as usize;
        g.data[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = 0.0);
        g.mark[i] = false;
    }
    g.touched.clear();
}
