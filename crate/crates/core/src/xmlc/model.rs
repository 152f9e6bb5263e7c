use serde::{Deserialize, Serialize};

use super::{dot, log_sigmoid, sigmoid, LabelTree, TrainConfig};
use crate::ranking::{rank_order, top_k, Query, RankedPrediction, Ranker};
use crate::sparse::SparseVec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XmlModel {
    pub config: TrainConfig,
    pub n_features: u32,
    /// Embedding used by the tree scorers, frozen after the first phase.
    pub(crate) route: Vec<f32>,
    pub(crate) embedding: Vec<f32>,
    pub tree: LabelTree,
    pub(crate) node_w: Vec<f32>,
    pub(crate) node_b: Vec<f32>,
    pub(crate) gate: Vec<f32>,
    pub(crate) refine: Vec<f32>,
    pub(crate) label_features: Vec<SparseVec>,
    #[serde(skip)]
    classifiers: Vec<f32>,
}

/// `max(0, sum_i x_i * table[i])`.
pub(crate) fn embed_into(table: &[f32], d: usize, x: &SparseVec, out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &(i, v) in &x.entries {
        let row = &table[i as usize * d..(i as usize + 1) * d];
        for (o, &e) in out.iter_mut().zip(row) {
            *o += v * e;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Unit-normalized embedding, or `None` when it vanishes.
pub(crate) fn unit_embedding(table: &[f32], d: usize, x: &SparseVec) -> Option<Vec<f32>> {
    if x.is_zero() {
        return None;
    }
    let mut e = vec![0.0; d];
    embed_into(table, d, x, &mut e);
    let norm = dot(&e, &e).sqrt();
    if norm > 0.0 && norm.is_finite() {
        e.iter_mut().for_each(|v| *v /= norm);
        Some(e)
    } else {
        None
    }
}

impl XmlModel {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: TrainConfig,
        n_features: u32,
        route: Vec<f32>,
        embedding: Vec<f32>,
        tree: LabelTree,
        node_w: Vec<f32>,
        node_b: Vec<f32>,
        gate: Vec<f32>,
        refine: Vec<f32>,
        label_features: Vec<SparseVec>,
    ) -> Self {
        let mut m = XmlModel {
            config,
            n_features,
            route,
            embedding,
            tree,
            node_w,
            node_b,
            gate,
            refine,
            label_features,
            classifiers: Vec::new(),
        };
        m.refresh_classifiers();
        m
    }

    /// Recomputes the cached per-label classifier vectors from the parameters.
    pub(crate) fn refresh_classifiers(&mut self) {
        let d = self.dim();
        let mut w = vec![0.0; self.n_labels() * d];
        for l in 0..self.n_labels() {
            let out = &mut w[l * d..(l + 1) * d];
            let z = &self.refine[l * d..(l + 1) * d];
            match unit_embedding(&self.embedding, d, &self.label_features[l]) {
                Some(e) => {
                    let g = sigmoid(self.gate[l]);
                    for ((o, &ej), &zj) in out.iter_mut().zip(&e).zip(z) {
                        *o = g * ej + (1.0 - g) * zj;
                    }
                }
                None => out.copy_from_slice(z),
            }
        }
        self.classifiers = w;
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn n_labels(&self) -> usize {
        self.label_features.len()
    }

    pub fn classifier(&self, label: u32) -> &[f32] {
        let d = self.dim();
        &self.classifiers[label as usize * d..(label as usize + 1) * d]
    }

    /// Effective gate; zero when the label's embedded features vanish.
    pub fn gate_value(&self, label: u32) -> f32 {
        match unit_embedding(&self.embedding, self.dim(), &self.label_features[label as usize]) {
            Some(_) => sigmoid(self.gate[label as usize]),
            None => 0.0,
        }
    }

    pub fn embed(&self, x: &SparseVec) -> Vec<f32> {
        let mut h = vec![0.0; self.dim()];
        embed_into(&self.embedding, self.dim(), x, &mut h);
        h
    }

    fn node_score(&self, node: u32, h: &[f32]) -> f32 {
        let d = self.dim();
        let n = node as usize;
        dot(&self.node_w[n * d..(n + 1) * d], h) + self.node_b[n]
    }

    /// Leaves surviving a beam search on cumulative log-probability.
    pub fn shortlist_leaves(&self, x: &SparseVec) -> Vec<u32> {
        let mut h = vec![0.0; self.dim()];
        embed_into(&self.route, self.dim(), x, &mut h);
        let nodes = &self.tree.nodes;
        let mut beam: Vec<(u32, f32)> = vec![(0, 0.0)];
        while beam.iter().any(|&(n, _)| !nodes[n as usize].is_leaf()) {
            let mut next = Vec::with_capacity(beam.len() * 2);
            for &(n, lp) in &beam {
                match nodes[n as usize].children {
                    None => next.push((n, lp)),
                    Some(children) => {
                        for c in children {
                            next.push((c, lp + log_sigmoid(self.node_score(c, &h))));
                        }
                    }
                }
            }
            next.sort_by(rank_order);
            next.truncate(self.config.beam);
            beam = next;
        }
        let mut leaves: Vec<u32> = beam.into_iter().map(|(n, _)| n).collect();
        leaves.sort_unstable();
        leaves
    }

    /// Candidate labels, ascending.
    pub fn shortlist(&self, x: &SparseVec) -> Vec<u32> {
        let mut labels: Vec<u32> = self
            .shortlist_leaves(x)
            .into_iter()
            .flat_map(|n| self.tree.nodes[n as usize].labels.iter().copied())
            .collect();
        labels.sort_unstable();
        labels
    }

    /// Top `k` shortlisted labels by `w_l . embed(x)`; `k` is capped at `top_b`.
    pub fn predict_topk(&self, x: &SparseVec, k: usize) -> Vec<(u32, f32)> {
        let h = self.embed(x);
        let scored = self
            .shortlist(x)
            .into_iter()
            .map(|l| (l, dot(self.classifier(l), &h)))
            .collect();
        top_k(scored, k.min(self.config.top_b))
    }

    /// Scores of every label, bypassing the shortlister.
    pub fn score_all(&self, x: &SparseVec) -> Vec<f32> {
        let h = self.embed(x);
        (0..self.n_labels() as u32)
            .map(|l| dot(self.classifier(l), &h))
            .collect()
    }

    pub fn parameters_finite(&self) -> bool {
        [&self.route, &self.embedding, &self.node_w, &self.node_b, &self.gate, &self.refine]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl Ranker for XmlModel {
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
    use crate::xmlc::TreeNode;

    fn two_leaf_model(beam: usize) -> XmlModel {
        let node = |parent, children, depth, labels: Vec<u32>| TreeNode { parent, children, depth, labels };
        let tree = LabelTree::from_nodes(
            vec![
                node(None, Some([1, 2]), 0, vec![0, 1, 2, 3]),
                node(Some(0), None, 1, vec![0, 1]),
                node(Some(0), None, 1, vec![2, 3]),
            ],
            4,
        )
        .unwrap();
        let d = 2;
        let config = TrainConfig { embedding_dim: d, beam, ..TrainConfig::default() };
        XmlModel::from_parts(
            config,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            tree,
            vec![0.0, 0.0, 1.0, 0.0, -1.0, 0.0],
            vec![0.0, 0.5, -0.5],
            vec![0.0; 4],
            vec![0.1, 0.0, 0.2, 0.0, 0.0, 0.3, 0.0, 0.4],
            vec![SparseVec::zeros(2); 4],
        )
    }

    #[test]
    fn single_path_beam() {
        let m = two_leaf_model(1);
        let x = SparseVec::from_pairs(2, vec![(0, 1.0)]).unwrap();
        assert_eq!(m.shortlist(&x), vec![0, 1]);
        let wide = two_leaf_model(2);
        assert_eq!(wide.shortlist(&x), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_input_ties_by_index() {
        let m = two_leaf_model(2);
        let got = m.predict_topk(&SparseVec::zeros(2), 3);
        assert_eq!(got, vec![(0, 0.0), (1, 0.0), (2, 0.0)]);
    }

    #[test]
    fn zero_label_features_force_gate() {
        let m = two_leaf_model(2);
        assert_eq!(m.gate_value(0), 0.0);
        assert_eq!(m.classifier(3), &[0.0, 0.4]);
    }

    #[test]
    fn k_beyond_shortlist() {
        let m = two_leaf_model(1);
        let x = SparseVec::from_pairs(2, vec![(0, 1.0)]).unwrap();
        assert_eq!(m.predict_topk(&x, 10).len(), 2);
    }
}
