use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alloc::measure_peak;
use crate::deep::{upsample, LowResFeatures, UpsamplerManifest, UpsamplerSpec, WeightArchive};
use crate::error::{Error, Result};
use crate::features::{featurize_classical, FeatureSetConfig};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    /// Deep feature channels produced by the upsampler.
    pub k: usize,
    pub patch_size: usize,
    pub d_hidden: usize,
    pub d_down: usize,
    pub feature_config: FeatureSetConfig,
    /// Sizes whose analytic stack total exceeds this are reported as OOM.
    pub budget_bytes: Option<u64>,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256],
            k: 16,
            patch_size: 14,
            d_hidden: 16,
            d_down: 8,
            feature_config: FeatureSetConfig::default(),
            budget_bytes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub side: usize,
    pub time_s: Option<f64>,
    /// Peak heap above the starting level; `None` without a tracking allocator.
    pub peak_bytes: Option<u64>,
    /// Size of the classical plus deep stacks in float32.
    pub analytic_bytes: u64,
    pub oom: bool,
}

/// `H * W * (N + k) * 4`.
pub fn analytic_stack_bytes(height: usize, width: usize, classical_channels: usize, k: usize) -> u64 {
    height as u64 * width as u64 * (classical_channels + k) as u64 * 4
}

/// Deterministic small random weights for timing runs.
pub fn random_upsampler(d_in: usize, k: usize, patch_size: usize, d_hidden: usize, d_down: usize, seed: u64) -> Result<WeightArchive> {
    let manifest = UpsamplerManifest::new(UpsamplerSpec {
        d_in,
        d_out: k,
        d_hidden,
        d_down,
        kernel_size: 3,
        num_stages: UpsamplerSpec::stages_for_patch(patch_size),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WeightArchive::from_fn(manifest, |name, dims| {
        let n: usize = dims.iter().product();
        let data = if name.ends_with("running_var") || name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
            vec![1.0; n]
        } else if name.ends_with("running_mean") {
            vec![0.0; n]
        } else {
            let fan_in = if dims.len() == 4 { dims[0] * dims[1] * dims[2] } else { 1 };
            let s = (1.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-s..s)).collect()
        };
        Tensor::new(dims.to_vec(), data).expect("dims from manifest")
    })
}

/// Times featurize + upsample at each side length (square images), in
/// ascending order. Sizes over budget or whose stacks cannot be reserved
/// become OOM rows and the run continues.
pub fn measure_pipeline_scaling(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    let p = cfg.patch_size;
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if let Some(&s) = sizes.iter().find(|&&s| s < 2 * p) {
        return Err(Error::arg(format!("size {s} below twice the patch size {p}")));
    }
    let weights = random_upsampler(cfg.k, cfg.k, p, cfg.d_hidden, cfg.d_down, cfg.seed)?;
    let n_classical = cfg.feature_config.channel_count();
    let mut rows = Vec::with_capacity(sizes.len());
    for side in sizes {
        let analytic = analytic_stack_bytes(side, side, n_classical, cfg.k);
        let over_budget = cfg.budget_bytes.is_some_and(|b| analytic > b);
        let reservable = {
            let mut probe: Vec<u8> = Vec::new();
            usize::try_from(analytic).is_ok_and(|n| probe.try_reserve_exact(n).is_ok())
        };
        if over_budget || !reservable {
            log::warn!("side {side}: {analytic} bytes of stacks do not fit, recording OOM");
            rows.push(ScalingRow {
                side,
                time_s: None,
                peak_bytes: None,
                analytic_bytes: analytic,
                oom: true,
            });
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ side as u64);
        let image = Tensor::new(vec![side, side, 1], (0..side * side).map(|_| rng.random::<f32>()).collect())?;
        let g = side.div_ceil(p);
        let grid = Tensor::new(vec![g, g, cfg.k], (0..g * g * cfg.k).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let lr = LowResFeatures::new(grid, p, (side, side))?;
        let start = Instant::now();
        let (out, peak) = measure_peak(|| -> Result<(usize, usize)> {
            let deep = upsample(&image, &lr, &weights)?;
            let classical = featurize_classical(&image, &cfg.feature_config)?;
            Ok((classical.channels(), deep.channels()))
        });
        out?;
        rows.push(ScalingRow {
            side,
            time_s: Some(start.elapsed().as_secs_f64()),
            peak_bytes: peak.map(|b| b as u64),
            analytic_bytes: analytic,
            oom: false,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_total_is_linear_in_k() {
        let a = analytic_stack_bytes(100, 50, 63, 16);
        assert_eq!(a, 100 * 50 * 79 * 4);
        let d16 = analytic_stack_bytes(10, 10, 0, 16);
        let d128 = analytic_stack_bytes(10, 10, 0, 128);
        assert_eq!(d128, 8 * d16);
    }

    #[test]
    fn rows_come_back_sorted_with_oom() {
        let cfg = ScalingConfig {
            sizes: vec![64, 32],
            k: 4,
            patch_size: 14,
            d_hidden: 4,
            d_down: 4,
            feature_config: FeatureSetConfig {
                sigmas: vec![0.0, 1.0],
                membrane_kernel_size: 5,
                ..Default::default()
            },
            budget_bytes: Some(analytic_stack_bytes(40, 40, 21, 4)),
            seed: 1,
        };
        let rows = measure_pipeline_scaling(&cfg).unwrap();
        assert_eq!(rows.iter().map(|r| r.side).collect::<Vec<_>>(), vec![32, 64]);
        assert!(!rows[0].oom && rows[0].time_s.is_some());
        assert!(rows[1].oom && rows[1].time_s.is_none());
    }

    #[test]
    fn sizes_below_two_patches_are_rejected() {
        let cfg = ScalingConfig {
            sizes: vec![20],
            ..Default::default()
        };
        assert!(matches!(measure_pipeline_scaling(&cfg), Err(Error::Argument(_))));
    }
}
