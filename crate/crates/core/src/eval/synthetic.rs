//! Seeded two-phase synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetImage};
use crate::engine::SparseLabelMap;
use crate::error::Result;
use crate::features::FeatureStack;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phases {
    /// Phases differ in mean intensity; a threshold separates them.
    Intensity,
    /// Same mean, different noise amplitude; only local statistics help.
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub phases: Phases,
    /// Fraction of pixels carrying a sparse label.
    pub label_fraction: f64,
    /// Standard deviation of the noise on the oracle deep channel; `None`
    /// omits deep features.
    pub oracle_noise: Option<f32>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 6,
            height: 64,
            width: 64,
            phases: Phases::Intensity,
            label_fraction: 0.02,
            oracle_noise: None,
            seed: 0,
        }
    }
}

/// Smooth random field: a few low-frequency plane waves.
fn phase_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let period = rng.random_range(0.35..0.9) * h.max(w) as f32;
            let freq = std::f32::consts::TAU / period;
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            let v: f32 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum();
            if v > 0.0 {
                2
            } else {
                1
            }
        })
        .collect()
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let gt = phase_map(h, w, &mut rng);
        let pixels: Vec<f32> = gt
            .iter()
            .map(|&c| {
                let v = match spec.phases {
                    Phases::Intensity => {
                        let mean: f32 = if c == 1 { 0.3 } else { 0.7 };
                        mean + Normal::new(0.0, 0.05).unwrap().sample(&mut rng)
                    }
                    Phases::Texture => {
                        let sd: f32 = if c == 1 { 0.10 } else { 0.14 };
                        0.5 + Normal::new(0.0, sd).unwrap().sample(&mut rng)
                    }
                };
                v.clamp(0.0, 1.0)
            })
            .collect();
        let labels: Vec<u8> = gt
            .iter()
            .map(|&c| if rng.random_bool(spec.label_fraction) { c } else { 0 })
            .collect();
        let deep = match spec.oracle_noise {
            Some(sd) => {
                let noise = Normal::new(0.0, sd).unwrap();
                let data = gt.iter().map(|&c| (c - 1) as f32 + noise.sample(&mut rng)).collect();
                Some(FeatureStack::with_prefix(Tensor::new(vec![h, w, 1], data)?, "deep_")?)
            }
            None => None,
        };
        images.push(DatasetImage {
            stem: format!("img{i:02}"),
            image: Tensor::new(vec![h, w, 1], pixels)?,
            labels: Some(SparseLabelMap::from_grid(h, w, labels, 2)?),
            gt: Some(SparseLabelMap::from_grid(h, w, gt, 2)?),
            deep,
        });
    }
    Ok(Dataset { class_count: 2, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_phases_present_and_seeded() {
        let spec = SyntheticSpec {
            oracle_noise: Some(0.25),
            ..Default::default()
        };
        let a = synthetic_dataset(&spec).unwrap();
        let b = synthetic_dataset(&spec).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
        }
        for im in &a.images {
            let counts = im.gt.as_ref().unwrap().class_counts();
            assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
            assert!(im.labels.as_ref().unwrap().labelled_count() > 0);
            assert_eq!(im.deep.as_ref().unwrap().channels(), 1);
        }
    }
}
