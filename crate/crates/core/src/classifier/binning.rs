//! Quantised feature matrix shared by the tree learners.
//!
//! Cut points are values taken from the training data. A value falls in bin
//! `b` when exactly `b` cuts are `<=` it, so "bin < b" is the same test as
//! "value < cuts[b - 1]". Splits therefore store a data value as threshold,
//! which makes tree predictions invariant to strictly increasing transforms
//! of any feature.

pub const MAX_BINS: usize = 256;

pub struct BinnedMatrix {
    pub n_rows: usize,
    pub n_features: usize,
    /// Column-major bin indices: `bins[f * n_rows + i]`.
    pub bins: Vec<u8>,
    pub cuts: Vec<Vec<f32>>,
}

impl BinnedMatrix {
    pub fn build(data: &[f32], n_rows: usize, n_features: usize) -> Self {
        let mut cuts = Vec::with_capacity(n_features);
        let mut bins = vec![0u8; n_rows * n_features];
        let mut col = Vec::with_capacity(n_rows);
        for f in 0..n_features {
            col.clear();
            col.extend((0..n_rows).map(|i| data[i * n_features + f]));
            let c = feature_cuts(&col);
            for (i, &v) in col.iter().enumerate() {
                bins[f * n_rows + i] = c.partition_point(|&cut| cut <= v) as u8;
            }
            cuts.push(c);
        }
        Self {
            n_rows,
            n_features,
            bins,
            cuts,
        }
    }

    #[inline]
    pub fn column(&self, f: usize) -> &[u8] {
        &self.bins[f * self.n_rows..(f + 1) * self.n_rows]
    }

    pub fn n_bins(&self, f: usize) -> usize {
        self.cuts[f].len() + 1
    }
}

fn feature_cuts(values: &[f32]) -> Vec<f32> {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut distinct: Vec<f32> = Vec::new();
    for &v in &sorted {
        if distinct.last() != Some(&v) {
            distinct.push(v);
        }
    }
    if distinct.len() <= MAX_BINS {
        return distinct.into_iter().skip(1).collect();
    }
    // quantile cuts by rank over the full (repeated) sample
    let n = sorted.len();
    let mut cuts = Vec::with_capacity(MAX_BINS - 1);
    for q in 1..MAX_BINS {
        let v = sorted[(q * n / MAX_BINS).min(n - 1)];
        if v > sorted[0] && cuts.last().is_none_or(|&last| v > last) {
            cuts.push(v);
        }
    }
    cuts
}
