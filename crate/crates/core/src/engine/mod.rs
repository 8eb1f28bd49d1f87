//! The interactive workflow: featurize, train on sparse labels, segment.

mod image_io;
mod labels;
mod project;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierModel;
use crate::deep::formats::encode_fts;
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::numerics::Tensor;

pub use image_io::{decode_image, encode_grey_png, encode_rgb_png, load_image};
pub use labels::{decode_indexed_png, encode_indexed_png, palette, RleRecord, SparseLabelMap};
pub use project::{DeepCache, DeepKey, HistoryEntry, Project, TrainMetrics, TrainedModel};

/// Hex SHA-256 over the concatenation of `parts`.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a tensor: dims plus little-endian payload.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    for chunk in t.data().chunks(1 << 14) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        h.update(&bytes);
    }
    hex(&h.finalize())
}

/// Dense per-pixel result: labels in `1..=C` and `[H, W, C]` probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub probabilities: Tensor,
}

impl Segmentation {
    pub fn class_count(&self) -> usize {
        self.probabilities.channels()
    }

    pub fn labels_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, 1],
            self.labels.iter().map(|&v| v as f32).collect(),
        )
        .expect("dims match labels")
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_indexed_png(self.height, self.width, &self.labels, self.class_count())
    }

    /// Probability plane of 1-based `class` as an FTS1 file.
    pub fn probability_fts(&self, class: usize) -> Result<Vec<u8>> {
        if class == 0 || class > self.class_count() {
            return Err(Error::arg(format!("class {class} outside 1..={}", self.class_count())));
        }
        let plane = self.probabilities.plane(class - 1)?.into_tensor();
        Ok(encode_fts(&plane, 1, (self.height as u32, self.width as u32)))
    }
}

const SEGMENT_BLOCK: usize = 4096;

/// Applies `model` to every pixel of `classical` followed by the first
/// `deep.1` channels of `deep.0`, assembling feature rows block by block so
/// the concatenated stack is never materialised.
pub fn predict_parts(
    model: &ClassifierModel,
    classical: &FeatureStack,
    deep: Option<(&FeatureStack, usize)>,
) -> Result<Segmentation> {
    let (h, w) = (classical.height(), classical.width());
    let n_cls = classical.channels();
    let (n_deep, deep_src) = match deep {
        Some((d, j)) => {
            if d.height() != h || d.width() != w || j > d.channels() {
                return Err(Error::shape("deep stack does not match the classical stack"));
            }
            (j, Some((d.raster().data(), d.channels())))
        }
        None => (0, None),
    };
    let f = n_cls + n_deep;
    if f != model.feature_arity() {
        return Err(Error::shape(format!("model expects {} features, stack has {f}", model.feature_arity())));
    }
    let c = model.class_count();
    let n = h * w;
    let mut labels = vec![0u8; n];
    let mut probs = vec![0.0f32; n * c];
    let cls = classical.raster().data();
    labels
        .par_chunks_mut(SEGMENT_BLOCK)
        .zip(probs.par_chunks_mut(SEGMENT_BLOCK * c))
        .enumerate()
        .try_for_each(|(b, (lab, prob))| -> Result<()> {
            let p0 = b * SEGMENT_BLOCK;
            let rows = lab.len();
            let mut buf = Vec::with_capacity(rows * f);
            for p in p0..p0 + rows {
                buf.extend_from_slice(&cls[p * n_cls..(p + 1) * n_cls]);
                if let Some((d, dc)) = deep_src {
                    buf.extend_from_slice(&d[p * dc..p * dc + n_deep]);
                }
            }
            let pred = model.predict_rows(&buf)?;
            lab.copy_from_slice(&pred.labels);
            prob.copy_from_slice(&pred.probabilities);
            Ok(())
        })?;
    Ok(Segmentation {
        height: h,
        width: w,
        labels,
        probabilities: Tensor::new(vec![h, w, c], probs)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Independent `U(0, 1)` values per pixel and channel.
    Noise,
    /// All-zero channels.
    Uniform,
    /// Copies of the first `count` channels.
    Duplicate,
}

/// Appends `count` uninformative channels of the given kind.
pub fn add_baseline_channels(stack: &FeatureStack, kind: BaselineKind, count: usize, seed: u64) -> Result<FeatureStack> {
    if count == 0 {
        return Err(Error::arg("baseline channel count must be at least 1"));
    }
    let (h, w, f) = (stack.height(), stack.width(), stack.channels());
    if kind == BaselineKind::Duplicate && count > f {
        return Err(Error::arg(format!("cannot duplicate {count} of {f} channels")));
    }
    let src = stack.raster().data();
    let data: Vec<f32> = match kind {
        BaselineKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..h * w * count).map(|_| rng.random::<f32>()).collect()
        }
        BaselineKind::Uniform => vec![0.0; h * w * count],
        BaselineKind::Duplicate => src.chunks(f).flat_map(|px| px[..count].iter().copied()).collect(),
    };
    let tag = match kind {
        BaselineKind::Noise => "noise",
        BaselineKind::Uniform => "zero",
        BaselineKind::Duplicate => "dup",
    };
    let names = (0..count).map(|i| format!("baseline_{tag}_{}", f + i)).collect();
    let extra = FeatureStack::new(Tensor::new(vec![h, w, count], data)?.with_channel_names(names)?)?;
    FeatureStack::concat(&[stack, &extra])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(h: usize, w: usize, f: usize) -> FeatureStack {
        FeatureStack::with_prefix(Tensor::from_fn_hwc(h, w, f, |y, x, c| (y * 31 + x * 7 + c) as f32), "f").unwrap()
    }

    #[test]
    fn uniform_channels_are_zero() {
        let s = add_baseline_channels(&stack(3, 4, 2), BaselineKind::Uniform, 3, 0).unwrap();
        assert_eq!(s.channels(), 5);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(&s.pixel(y, x)[2..], &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn duplicates_are_bit_exact() {
        let base = stack(3, 4, 3);
        let s = add_baseline_channels(&base, BaselineKind::Duplicate, 2, 0).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let p = s.pixel(y, x);
                assert_eq!(p[3].to_bits(), p[0].to_bits());
                assert_eq!(p[4].to_bits(), p[1].to_bits());
            }
        }
        assert!(add_baseline_channels(&base, BaselineKind::Duplicate, 4, 0).is_err());
        assert!(add_baseline_channels(&base, BaselineKind::Noise, 0, 0).is_err());
    }

    #[test]
    fn noise_is_seeded_unit_uniform() {
        let base = stack(8, 8, 1);
        let a = add_baseline_channels(&base, BaselineKind::Noise, 4, 7).unwrap();
        let b = add_baseline_channels(&base, BaselineKind::Noise, 4, 7).unwrap();
        let c = add_baseline_channels(&base, BaselineKind::Noise, 4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let noise: Vec<f32> = a.raster().data().chunks(5).flat_map(|p| p[1..].to_vec()).collect();
        assert!(noise.iter().all(|&v| (0.0..1.0).contains(&v)));
        let mean = noise.iter().sum::<f32>() / noise.len() as f32;
        assert!((mean - 0.5).abs() < 0.1);
    }

    #[test]
    fn baselines_stack_repeatedly() {
        let s = add_baseline_channels(&stack(2, 2, 1), BaselineKind::Uniform, 1, 0).unwrap();
        let s = add_baseline_channels(&s, BaselineKind::Uniform, 1, 0).unwrap();
        assert_eq!(s.channels(), 3);
    }

    #[test]
    fn hashes_are_stable_and_sensitive() {
        let t = Tensor::from_fn_hwc(2, 2, 1, |y, x, _| (y + x) as f32);
        assert_eq!(tensor_hash(&t), tensor_hash(&t.clone()));
        let u = t.clone().reshape(vec![4, 1]).unwrap();
        assert_ne!(tensor_hash(&t), tensor_hash(&u));
        assert_ne!(sha256_hex(&[b"ab", b"c"]), sha256_hex(&[b"a", b"bc"]));
        assert_eq!(sha256_hex(&[]).len(), 64);
    }
}
