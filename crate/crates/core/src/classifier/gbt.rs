//! Histogram gradient boosting with a softmax multiclass objective.
//!
//! One regression tree per class per round, grown depth-wise on quantised
//! features. Leaf weights are `-eta * G / (H + lambda)`; a split is taken
//! only when its gain is positive and both children keep at least
//! `min_child_weight` hessian mass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::BinnedMatrix;
use super::tree::Tree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f32,
    pub min_child_weight: f32,
    pub lambda: f32,
    pub gamma: f32,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            max_depth: 6,
            learning_rate: 0.3,
            min_child_weight: 1.0,
            lambda: 1.0,
            gamma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbtModel {
    /// Round-major: tree `r * classes + c` boosts class `c`.
    pub trees: Vec<Tree>,
    pub classes: usize,
}

impl GbtModel {
    pub fn margins(&self, row: &[f32], out: &mut [f32]) {
        out.fill(0.0);
        for (t, tree) in self.trees.iter().enumerate() {
            out[t % self.classes] += tree.leaf_values(row)[0];
        }
    }
}

#[derive(Clone, Copy, Default)]
struct GradPair {
    g: f64,
    h: f64,
}

struct Split {
    feature: usize,
    bin: usize,
    gain: f64,
}

pub fn train(
    binned: &BinnedMatrix,
    labels: &[usize],
    classes: usize,
    params: &GbtParams,
    importance: &mut [f64],
) -> GbtModel {
    let n = binned.n_rows;
    let mut margins = vec![0.0f32; n * classes];
    let mut trees = Vec::with_capacity(params.n_rounds * classes);
    let mut probs = vec![0.0f32; n * classes];
    let mut grads = vec![GradPair::default(); n];
    for _ in 0..params.n_rounds {
        for (p, m) in probs.chunks_mut(classes).zip(margins.chunks(classes)) {
            softmax_into(m, p);
        }
        for c in 0..classes {
            for i in 0..n {
                let p = probs[i * classes + c] as f64;
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                grads[i] = GradPair {
                    g: p - y,
                    h: (2.0 * p * (1.0 - p)).max(1e-16),
                };
            }
            let (tree, assignment) = grow_tree(binned, &grads, params, importance);
            for i in 0..n {
                margins[i * classes + c] += tree.leaf[assignment[i]];
            }
            trees.push(tree);
        }
    }
    GbtModel { trees, classes }
}

pub fn softmax_into(margins: &[f32], out: &mut [f32]) {
    let max = margins.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f64;
    for (o, &m) in out.iter_mut().zip(margins) {
        let e = ((m - max) as f64).exp();
        *o = e as f32;
        total += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / total) as f32;
    }
}

fn leaf_weight(sum: GradPair, params: &GbtParams) -> f32 {
    (-(sum.g / (sum.h + params.lambda as f64)) * params.learning_rate as f64) as f32
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

/// Grows one tree and returns it with each row's final node.
fn grow_tree(
    binned: &BinnedMatrix,
    grads: &[GradPair],
    params: &GbtParams,
    importance: &mut [f64],
) -> (Tree, Vec<usize>) {
    let n = binned.n_rows;
    let mut tree = Tree::new(1);
    let root = tree.push_node();
    let mut assignment = vec![root; n];
    let mut frontier: Vec<(usize, Vec<u32>)> = vec![(root, (0..n as u32).collect())];
    for depth in 0..=params.max_depth {
        let mut next = Vec::new();
        for (node, rows) in frontier {
            let total = rows.iter().fold(GradPair::default(), |acc, &i| GradPair {
                g: acc.g + grads[i as usize].g,
                h: acc.h + grads[i as usize].h,
            });
            let split = if depth < params.max_depth {
                best_split(binned, grads, &rows, total, params)
            } else {
                None
            };
            match split {
                Some(s) => {
                    importance[s.feature] += s.gain;
                    let col = binned.column(s.feature);
                    let (l_rows, r_rows): (Vec<u32>, Vec<u32>) =
                        rows.iter().partition(|&&i| (col[i as usize] as usize) < s.bin);
                    let l = tree.push_node();
                    let r = tree.push_node();
                    tree.set_split(node, s.feature, binned.cuts[s.feature][s.bin - 1], l, r);
                    for &i in &l_rows {
                        assignment[i as usize] = l;
                    }
                    for &i in &r_rows {
                        assignment[i as usize] = r;
                    }
                    next.push((l, l_rows));
                    next.push((r, r_rows));
                }
                None => tree.set_leaf(node, &[leaf_weight(total, params)]),
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    (tree, assignment)
}

fn best_split(
    binned: &BinnedMatrix,
    grads: &[GradPair],
    rows: &[u32],
    total: GradPair,
    params: &GbtParams,
) -> Option<Split> {
    let lambda = params.lambda as f64;
    let mcw = params.min_child_weight as f64;
    if total.h < 2.0 * mcw {
        return None;
    }
    let parent = score(total.g, total.h, lambda);
    let per_feature: Vec<Option<Split>> = (0..binned.n_features)
        .into_par_iter()
        .map(|f| {
            let nb = binned.n_bins(f);
            if nb < 2 {
                return None;
            }
            let col = binned.column(f);
            let mut hist = vec![GradPair::default(); nb];
            for &i in rows {
                let b = &mut hist[col[i as usize] as usize];
                b.g += grads[i as usize].g;
                b.h += grads[i as usize].h;
            }
            let mut best: Option<Split> = None;
            let (mut gl, mut hl) = (0.0, 0.0);
            for (b, bin) in hist.iter().enumerate().take(nb - 1) {
                gl += bin.g;
                hl += bin.h;
                let (gr, hr) = (total.g - gl, total.h - hl);
                if hl < mcw || hr < mcw {
                    continue;
                }
                let gain = 0.5 * (score(gl, hl, lambda) + score(gr, hr, lambda) - parent) - params.gamma as f64;
                if gain > 1e-12 && best.as_ref().is_none_or(|s| gain > s.gain) {
                    best = Some(Split { feature: f, bin: b + 1, gain });
                }
            }
            best
        })
        .collect();
    per_feature
        .into_iter()
        .flatten()
        .fold(None, |best: Option<Split>, s| match best {
            Some(b) if b.gain >= s.gain => Some(b),
            _ => Some(s),
        })
}
