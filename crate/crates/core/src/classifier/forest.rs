//! Bagged Gini trees with per-node feature subsampling.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::BinnedMatrix;
use super::tree::Tree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    /// `None` uses `floor(sqrt(F))`.
    pub features_per_split: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            features_per_split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub classes: usize,
}

impl ForestModel {
    pub fn probabilities(&self, row: &[f32], out: &mut [f32]) {
        out.fill(0.0);
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.leaf_values(row)) {
                *o += v;
            }
        }
        let n = self.trees.len() as f32;
        out.iter_mut().for_each(|o| *o /= n);
    }
}

/// Seed for tree `index`; a SplitMix64 step over the pair.
pub fn tree_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train(
    binned: &BinnedMatrix,
    labels: &[usize],
    classes: usize,
    params: &ForestParams,
    seed: u64,
    importance: &mut [f64],
) -> ForestModel {
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (binned.n_features as f64).sqrt().floor() as usize)
        .clamp(1, binned.n_features);
    let results: Vec<(Tree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, t));
            let n = binned.n_rows;
            let mut weights = vec![0u32; n];
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
            let mut imp = vec![0.0f64; binned.n_features];
            let tree = TreeBuilder {
                binned,
                labels,
                weights: &weights,
                classes,
                mtry,
                max_depth: params.max_depth.unwrap_or(usize::MAX),
            }
            .build(&mut rng, &mut imp);
            (tree, imp)
        })
        .collect();
    let mut trees = Vec::with_capacity(results.len());
    for (tree, imp) in results {
        for (a, b) in importance.iter_mut().zip(imp) {
            *a += b;
        }
        trees.push(tree);
    }
    ForestModel { trees, classes }
}

struct TreeBuilder<'a> {
    binned: &'a BinnedMatrix,
    labels: &'a [usize],
    weights: &'a [u32],
    classes: usize,
    mtry: usize,
    max_depth: usize,
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

impl TreeBuilder<'_> {
    fn build(&self, rng: &mut ChaCha8Rng, importance: &mut [f64]) -> Tree {
        let mut tree = Tree::new(self.classes);
        let root = tree.push_node();
        let rows: Vec<u32> = (0..self.binned.n_rows as u32)
            .filter(|&i| self.weights[i as usize] > 0)
            .collect();
        let mut stack = vec![(root, rows, 0usize)];
        while let Some((node, rows, depth)) = stack.pop() {
            let mut counts = vec![0.0f64; self.classes];
            for &i in &rows {
                counts[self.labels[i as usize]] += self.weights[i as usize] as f64;
            }
            let total: f64 = counts.iter().sum();
            let impurity = gini(&counts, total);
            let split = if depth < self.max_depth && impurity > 0.0 && total >= 2.0 {
                self.best_split(&rows, &counts, total, impurity, rng)
            } else {
                None
            };
            match split {
                Some((feature, bin, decrease)) => {
                    importance[feature] += decrease;
                    let col = self.binned.column(feature);
                    let (l_rows, r_rows): (Vec<u32>, Vec<u32>) =
                        rows.into_iter().partition(|&i| (col[i as usize] as usize) < bin);
                    let l = tree.push_node();
                    let r = tree.push_node();
                    tree.set_split(node, feature, self.binned.cuts[feature][bin - 1], l, r);
                    stack.push((r, r_rows, depth + 1));
                    stack.push((l, l_rows, depth + 1));
                }
                None => {
                    let dist: Vec<f32> = counts.iter().map(|c| (c / total) as f32).collect();
                    tree.set_leaf(node, &dist);
                }
            }
        }
        tree
    }

    /// Best `(feature, bin, weighted impurity decrease)` over `mtry` sampled features.
    fn best_split(
        &self,
        rows: &[u32],
        counts: &[f64],
        total: f64,
        impurity: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<(usize, usize, f64)> {
        let c = self.classes;
        let mut best: Option<(usize, usize, f64)> = None;
        let mut candidates: Vec<usize> = sample(rng, self.binned.n_features, self.mtry).into_vec();
        candidates.sort_unstable();
        for f in candidates {
            let nb = self.binned.n_bins(f);
            if nb < 2 {
                continue;
            }
            let col = self.binned.column(f);
            let mut hist = vec![0.0f64; nb * c];
            for &i in rows {
                hist[col[i as usize] as usize * c + self.labels[i as usize]] += self.weights[i as usize] as f64;
            }
            let mut left = vec![0.0f64; c];
            let mut right = counts.to_vec();
            let mut n_left = 0.0;
            for b in 0..nb - 1 {
                for k in 0..c {
                    let v = hist[b * c + k];
                    left[k] += v;
                    right[k] -= v;
                    n_left += v;
                }
                let n_right = total - n_left;
                if n_left <= 0.0 || n_right <= 0.0 {
                    continue;
                }
                let decrease = total * impurity - n_left * gini(&left, n_left) - n_right * gini(&right, n_right);
                if decrease > 1e-9 && best.is_none_or(|(_, _, d)| decrease > d) {
                    best = Some((f, b + 1, decrease));
                }
            }
        }
        best
    }
}
