//! Deep-feature acquisition: precomputed FTS1 files or a sidecar command.

use std::path::Path;
use std::process::Command;

use featseg_core::deep::{preprocess_shared_pca, symmetrize_flips, upsample, LowResFeatures, WeightArchive};
use featseg_core::engine::{encode_grey_png, encode_rgb_png, DeepCache, DeepKey};
use featseg_core::{Error, FeatureStack, Project, Result, Tensor};

use crate::config::ExtractorConfig;

/// Turns extractor output into a full-resolution stack of `k` channels.
///
/// A full-resolution file is truncated to its first `k` channels. A patch
/// grid is reduced to `k` channels by PCA when wider, then upsampled.
pub fn to_full_resolution(
    image: &Tensor,
    lr: LowResFeatures,
    k: Option<usize>,
    weights: Option<&WeightArchive>,
) -> Result<FeatureStack> {
    let (h, w, _) = image.hwc()?;
    let (gh, gw, d) = lr.grid.hwc()?;
    if (gh, gw) == (h, w) {
        let k = k.unwrap_or(d);
        if k == 0 || k > d {
            return Err(Error::Argument(format!("k={k} outside 1..={d}")));
        }
        let grid = if k == d { lr.grid } else { lr.grid.slice_channels(0, k)? };
        let mut stack = FeatureStack::with_prefix(grid, "deep_")?;
        stack.variance_ordered = true;
        return Ok(stack);
    }
    let weights = weights.ok_or_else(|| {
        Error::Provider("features are a patch grid; configure upsampler weights to bring them to full resolution".into())
    })?;
    let k = k.unwrap_or(weights.manifest.spec.d_in).min(d);
    let lr = if k < d { preprocess_shared_pca(&[lr], k)?.1 } else { lr };
    upsample(image, &lr, weights)
}

fn write_image_png(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = if image.channels() == 3 {
        encode_rgb_png(image)?
    } else {
        encode_grey_png(image)?
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Runs the sidecar once on `image`.
pub fn run_sidecar(command: &[String], image: &Tensor) -> Result<LowResFeatures> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::Provider("no extractor command configured".into()))?;
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("input.png");
    let output = dir.path().join("features.fts");
    write_image_png(image, &input)?;
    let out = Command::new(program)
        .args(args)
        .arg(&input)
        .arg(&output)
        .output()
        .map_err(|e| Error::Provider(format!("cannot run extractor {program:?}: {e}")))?;
    if !out.status.success() {
        return Err(Error::Provider(format!(
            "extractor exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    featseg_core::deep::load_feature_file(&output)
}

#[derive(Clone, Debug, Default)]
pub struct DeepRequest {
    pub k: Option<usize>,
    pub flip_symmetrized: bool,
}

/// Extracts with the configured sidecar and builds a cache for `project`.
pub fn extract_with_sidecar(
    project: &Project,
    extractor: &ExtractorConfig,
    weights: Option<&WeightArchive>,
    req: &DeepRequest,
) -> Result<DeepCache> {
    let image = project.image();
    let lr = if req.flip_symmetrized {
        symmetrize_flips(|im| run_sidecar(&extractor.command, im), image)?
    } else {
        run_sidecar(&extractor.command, image)?
    };
    let stack = to_full_resolution(image, lr, req.k.or(extractor.k), weights)?;
    cache_for(project, extractor.extractor_id(), req.flip_symmetrized, stack)
}

pub fn cache_for(project: &Project, extractor_id: String, flip_symmetrized: bool, stack: FeatureStack) -> Result<DeepCache> {
    let key = DeepKey {
        image_hash: project.image_hash().to_string(),
        extractor_id,
        k: stack.channels(),
        flip_symmetrized,
    };
    DeepCache::new(key, stack)
}

pub fn load_weights(path: Option<&Path>) -> Result<Option<WeightArchive>> {
    path.map(featseg_core::deep::load_weight_archive).transpose()
}
