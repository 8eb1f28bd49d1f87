use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LEAF: i32 = -1;

/// Flat binary tree. Internal node `i` sends `x` left when
/// `x[feature[i]] < threshold[i]`; leaves carry `width` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f32>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub leaf: Vec<f32>,
    pub width: usize,
}

impl Tree {
    pub fn new(width: usize) -> Self {
        Self {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            leaf: Vec::new(),
            width,
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.feature.len()
    }

    /// Appends a placeholder leaf and returns its index.
    pub fn push_node(&mut self) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.leaf.extend(std::iter::repeat_n(0.0, self.width));
        self.feature.len() - 1
    }

    pub fn set_split(&mut self, node: usize, feature: usize, threshold: f32, left: usize, right: usize) {
        self.feature[node] = feature as i32;
        self.threshold[node] = threshold;
        self.left[node] = left as u32;
        self.right[node] = right as u32;
    }

    pub fn set_leaf(&mut self, node: usize, values: &[f32]) {
        self.leaf[node * self.width..(node + 1) * self.width].copy_from_slice(values);
    }

    #[inline]
    pub fn leaf_index(&self, row: &[f32]) -> usize {
        let mut n = 0usize;
        loop {
            let f = self.feature[n];
            if f == LEAF {
                return n;
            }
            // NaN compares false and goes right
            n = if row[f as usize] < self.threshold[n] {
                self.left[n] as usize
            } else {
                self.right[n] as usize
            };
        }
    }

    #[inline]
    pub fn leaf_values(&self, row: &[f32]) -> &[f32] {
        let n = self.leaf_index(row);
        &self.leaf[n * self.width..(n + 1) * self.width]
    }

    /// `(split [n, 4], leaf [n, width])` tensors for archiving.
    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        let n = self.len();
        let mut split = Vec::with_capacity(n * 4);
        for i in 0..n {
            split.extend([
                self.feature[i] as f32,
                self.threshold[i],
                self.left[i] as f32,
                self.right[i] as f32,
            ]);
        }
        Ok((
            Tensor::new(vec![n, 4], split)?,
            Tensor::new(vec![n, self.width], self.leaf.clone())?,
        ))
    }

    pub fn from_tensors(split: &Tensor, leaf: &Tensor) -> Result<Self> {
        let (n, four) = split.matrix()?;
        let (ln, width) = leaf.matrix()?;
        if four != 4 || ln != n {
            return Err(Error::Archive("malformed tree tensors".into()));
        }
        let mut t = Self::new(width);
        for row in split.data().chunks(4) {
            t.feature.push(row[0] as i32);
            t.threshold.push(row[1]);
            t.left.push(row[2] as u32);
            t.right.push(row[3] as u32);
        }
        t.leaf = leaf.data().to_vec();
        for i in 0..n {
            if t.feature[i] != LEAF
                && (t.feature[i] < 0 || t.left[i] as usize >= n || t.right[i] as usize >= n || t.left[i] as usize <= i || t.right[i] as usize <= i)
            {
                return Err(Error::Archive(format!("tree node {i} has invalid links")));
            }
        }
        Ok(t)
    }
}
