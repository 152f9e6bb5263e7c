//! Balanced binary label tree built by recursive 2-means.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RESTARTS: usize = 6;
const MAX_ITERS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<u32>,
    pub children: Option<[u32; 2]>,
    pub depth: u32,
    /// Labels under this node, ascending.
    pub labels: Vec<u32>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Node 0 is the root; nodes are numbered breadth-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTree {
    pub nodes: Vec<TreeNode>,
    leaf_of: Vec<u32>,
}

impl LabelTree {
    /// Builds a tree from an explicit node list (children must follow parents).
    pub fn from_nodes(nodes: Vec<TreeNode>, n_labels: usize) -> Result<Self> {
        let mut leaf_of = vec![u32::MAX; n_labels];
        for (i, node) in nodes.iter().enumerate() {
            if node.is_leaf() {
                for &l in &node.labels {
                    let slot = leaf_of
                        .get_mut(l as usize)
                        .ok_or_else(|| Error::DimensionMismatch(format!("label {l} outside {n_labels}")))?;
                    if *slot != u32::MAX {
                        return Err(Error::InvalidParameter(format!("label {l} in two leaves")));
                    }
                    *slot = i as u32;
                }
            }
        }
        if let Some(l) = leaf_of.iter().position(|&n| n == u32::MAX) {
            return Err(Error::InvalidParameter(format!("label {l} in no leaf")));
        }
        Ok(LabelTree { nodes, leaf_of })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_labels(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn leaf_of(&self, label: u32) -> u32 {
        self.leaf_of[label as usize]
    }

    pub fn leaves(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.nodes.len() as u32).filter(|&n| self.nodes[n as usize].is_leaf())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn max_leaf_size(&self) -> usize {
        self.leaves()
            .map(|n| self.nodes[n as usize].labels.len())
            .max()
            .unwrap_or(0)
    }

    /// Nodes from just below the root down to the label's leaf.
    pub fn path(&self, label: u32) -> Vec<u32> {
        let mut path = Vec::new();
        let mut n = self.leaf_of(label);
        while let Some(p) = self.nodes[n as usize].parent {
            path.push(n);
            n = p;
        }
        path.reverse();
        path
    }

    pub fn sibling(&self, node: u32) -> Option<u32> {
        let p = self.nodes[node as usize].parent?;
        let [a, b] = self.nodes[p as usize].children?;
        Some(if a == node { b } else { a })
    }
}

/// Squared distance of each point to its side's mean, summed over both sides.
pub fn balanced_two_means_cost(reps: &[Vec<f32>], left: &[u32], right: &[u32]) -> f64 {
    side_cost(reps, left) + side_cost(reps, right)
}

fn side_cost(reps: &[Vec<f32>], side: &[u32]) -> f64 {
    if side.is_empty() {
        return 0.0;
    }
    let c = mean(reps, side);
    side.iter()
        .map(|&i| {
            reps[i as usize]
                .iter()
                .zip(&c)
                .map(|(&x, &m)| (x as f64 - m).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn mean(reps: &[Vec<f32>], side: &[u32]) -> Vec<f64> {
    let dim = reps.first().map_or(0, Vec::len);
    let mut c = vec![0.0; dim];
    for &i in side {
        for (cj, &x) in c.iter_mut().zip(&reps[i as usize]) {
            *cj += x as f64;
        }
    }
    let n = side.len().max(1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Splits `labels` into halves of sizes `ceil(n/2)` and `floor(n/2)`.
fn balanced_split(reps: &[Vec<f32>], labels: &[u32], rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
    let n = labels.len();
    let n_left = n.div_ceil(2);
    let mut best: Option<(f64, Vec<u32>, Vec<u32>)> = None;
    for _ in 0..RESTARTS {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let to_f64 = |i: usize| reps[labels[i] as usize].iter().map(|&x| x as f64).collect::<Vec<_>>();
        let (mut c1, mut c2) = (to_f64(a), to_f64(b));
        let mut assignment: Vec<usize> = Vec::new();
        for _ in 0..MAX_ITERS {
            let dir: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| x - y).collect();
            let mut scored: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let s = reps[labels[i] as usize]
                        .iter()
                        .zip(&dir)
                        .map(|(&x, &d)| x as f64 * d)
                        .sum::<f64>();
                    (s, i)
                })
                .collect();
            scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let mut next: Vec<usize> = scored[..n_left].iter().map(|&(_, i)| i).collect();
            next.sort_unstable();
            if next == assignment {
                break;
            }
            assignment = next;
            let mut in_left = vec![false; n];
            assignment.iter().for_each(|&i| in_left[i] = true);
            let (l, r): (Vec<u32>, Vec<u32>) = (0..n).map(|i| (i, labels[i])).fold(
                (Vec::new(), Vec::new()),
                |(mut l, mut r), (i, lab)| {
                    if in_left[i] {
                        l.push(lab)
                    } else {
                        r.push(lab)
                    }
                    (l, r)
                },
            );
            c1 = mean(reps, &l);
            c2 = mean(reps, &r);
        }
        let mut in_left = vec![false; n];
        assignment.iter().for_each(|&i| in_left[i] = true);
        let left: Vec<u32> = (0..n).filter(|&i| in_left[i]).map(|i| labels[i]).collect();
        let right: Vec<u32> = (0..n).filter(|&i| !in_left[i]).map(|i| labels[i]).collect();
        let cost = balanced_two_means_cost(reps, &left, &right);
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, left, right));
        }
    }
    let (_, left, right) = best.expect("at least one restart");
    (left, right)
}

/// Recursively halves the label set to depth `b_factors`; nodes with one label stay leaves.
pub fn cluster_labels(reps: &[Vec<f32>], b_factors: u32, seed: u64) -> Result<LabelTree> {
    if reps.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let dim = reps[0].len();
    if reps.iter().any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch("label representations differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![TreeNode {
        parent: None,
        children: None,
        depth: 0,
        labels: (0..reps.len() as u32).collect(),
    }];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        if nodes[i].depth >= b_factors || nodes[i].labels.len() < 2 {
            continue;
        }
        let (left, right) = balanced_split(reps, &nodes[i].labels, &mut rng);
        let depth = nodes[i].depth + 1;
        let first = nodes.len() as u32;
        for labels in [left, right] {
            nodes.push(TreeNode {
                parent: Some(i as u32),
                children: None,
                depth,
                labels,
            });
            queue.push_back(nodes.len() - 1);
        }
        nodes[i].children = Some([first, first + 1]);
    }
    LabelTree::from_nodes(nodes, reps.len())
}
