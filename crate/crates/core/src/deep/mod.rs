//! Deep (vision-transformer) features: shared-PCA preprocessing of patch
//! grids, the guided upsampler, compressed truncation, flip symmetrisation
//! and PCA-to-RGB visualisation.

pub mod formats;
pub mod upsampler;

use std::path::Path;

pub use formats::{read_fts, write_fts, FeatureFile, NamedTensorArchive};
pub use upsampler::{
    load_weight_archive, upsample, Activation, Normalization, UpsamplerManifest, UpsamplerSpec,
    WeightArchive,
};

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::numerics::pca::pca_fit_rows;
use crate::numerics::{PcaModel, Tensor};

/// Maximum number of pixels used to fit a visualisation PCA; larger stacks
/// are subsampled on a regular stride.
pub const VIZ_PCA_MAX_SAMPLES: usize = 1 << 16;

/// Patch-level feature grid of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LowResFeatures {
    pub grid: Tensor,
    pub patch_size: usize,
    pub source_dims: (usize, usize),
}

impl LowResFeatures {
    pub fn new(grid: Tensor, patch_size: usize, source_dims: (usize, usize)) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::shape(format!("feature grid must be [Hp,Wp,d], got {:?}", grid.dims())));
        }
        if patch_size == 0 {
            return Err(Error::arg("patch size must be positive"));
        }
        Ok(Self {
            grid,
            patch_size,
            source_dims,
        })
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }

    pub fn to_fts(&self) -> Vec<u8> {
        formats::encode_fts(
            &self.grid,
            self.patch_size as u32,
            (self.source_dims.0 as u32, self.source_dims.1 as u32),
        )
    }

    pub fn from_file(file: FeatureFile) -> Result<Self> {
        Self::new(
            file.tensor,
            file.patch_size as usize,
            (file.source_dims.0 as usize, file.source_dims.1 as usize),
        )
    }
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<LowResFeatures> {
    LowResFeatures::from_file(read_fts(path)?)
}

/// Fits one PCA over the patch vectors of every view and projects the first
/// (untransformed) view onto its top `k` components.
pub fn preprocess_shared_pca(views: &[LowResFeatures], k: usize) -> Result<(PcaModel, LowResFeatures)> {
    let first = views.first().ok_or_else(|| Error::arg("at least one feature view is required"))?;
    let d = first.channels();
    if k == 0 || k > d {
        return Err(Error::arg(format!("k = {k} must be within 1..={d}")));
    }
    if let Some(v) = views.iter().find(|v| v.channels() != d) {
        return Err(Error::shape(format!("view has {} channels, first view has {d}", v.channels())));
    }
    let pooled: Vec<f32> = views.iter().flat_map(|v| v.grid.data().iter().copied()).collect();
    let m = pooled.len() / d;
    let model = pca_fit_rows(&pooled, m, d, k)?;
    drop(pooled);
    let (hp, wp, _) = first.grid.hwc()?;
    let mut out = vec![0.0f32; hp * wp * k];
    for (o, row) in out.chunks_mut(k).zip(first.grid.data().chunks(d)) {
        model.project_row(row, o);
    }
    let grid = Tensor::new(vec![hp, wp, k], out)?;
    Ok((model, LowResFeatures::new(grid, first.patch_size, first.source_dims)?))
}

/// First `j` channels of a variance-ordered stack.
pub fn truncate_compressed(features: &FeatureStack, j: usize) -> Result<FeatureStack> {
    let k = features.channels();
    if j == 0 || j > k {
        return Err(Error::arg(format!("j = {j} must be within 1..={k}")));
    }
    features.slice(0, j)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Both,
}

pub const FLIP_GROUP: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Both];

/// Mirrors an `[H, W, C]` tensor; every flip is its own inverse.
pub fn flip(t: &Tensor, f: Flip) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    let (fh, fv) = match f {
        Flip::Identity => return Ok(t.clone()),
        Flip::Horizontal => (true, false),
        Flip::Vertical => (false, true),
        Flip::Both => (true, true),
    };
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = if fv { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if fh { w - 1 - x } else { x };
            data.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    let mut out = Tensor::new(t.dims().to_vec(), data)?;
    if let Some(n) = t.channel_names() {
        out = out.with_channel_names(n.to_vec())?;
    }
    Ok(out)
}

/// Averages the provider's features over the four axis flips of `image`,
/// un-flipping each grid before accumulation.
pub fn symmetrize_flips<F>(extract: F, image: &Tensor) -> Result<LowResFeatures>
where
    F: Fn(&Tensor) -> Result<LowResFeatures>,
{
    let mut acc: Option<(Vec<f64>, LowResFeatures)> = None;
    for f in FLIP_GROUP {
        let view = extract(&flip(image, f)?)?;
        let grid = flip(&view.grid, f)?;
        match &mut acc {
            None => {
                let sum = grid.data().iter().map(|&v| v as f64).collect();
                acc = Some((sum, LowResFeatures { grid, ..view }));
            }
            Some((sum, first)) => {
                if grid.dims() != first.grid.dims() {
                    return Err(Error::shape(format!(
                        "flipped view has dims {:?}, identity view {:?}",
                        grid.dims(),
                        first.grid.dims()
                    )));
                }
                for (s, &v) in sum.iter_mut().zip(grid.data()) {
                    *s += v as f64;
                }
            }
        }
    }
    let (sum, mut first) = acc.expect("flip group is non-empty");
    let n = FLIP_GROUP.len() as f64;
    first
        .grid
        .data_mut()
        .iter_mut()
        .zip(sum)
        .for_each(|(d, s)| *d = (s / n) as f32);
    Ok(first)
}

/// Three-channel `[H, W, 3]` rendering in `[0, 1]`: the first three
/// components of the stack (fitting a PCA unless the stack is already
/// variance ordered), each min-max normalised. Flat channels map to 0.5.
pub fn visualize_pca_rgb(features: &FeatureStack) -> Result<Tensor> {
    let (h, w, f) = (features.height(), features.width(), features.channels());
    if f < 3 {
        return Err(Error::arg(format!("need at least 3 channels to visualise, got {f}")));
    }
    let data = features.raster().data();
    let mut rgb = vec![0.0f32; h * w * 3];
    if features.variance_ordered {
        for (o, px) in rgb.chunks_mut(3).zip(data.chunks(f)) {
            o.copy_from_slice(&px[..3]);
        }
    } else {
        let n = h * w;
        let step = n.div_ceil(VIZ_PCA_MAX_SAMPLES).max(1);
        let sample: Vec<f32> = data
            .chunks(f)
            .step_by(step)
            .flat_map(|r| r.iter().copied())
            .collect();
        let m = sample.len() / f;
        if m < 3 {
            return Err(Error::arg("too few pixels to fit a 3-component PCA"));
        }
        let model = pca_fit_rows(&sample, m, f, 3)?;
        for (o, px) in rgb.chunks_mut(3).zip(data.chunks(f)) {
            model.project_row(px, o);
        }
    }
    for c in 0..3 {
        let (lo, hi) = rgb
            .iter()
            .skip(c)
            .step_by(3)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in rgb.iter_mut().skip(c).step_by(3) {
            *v = if span > 0.0 && span.is_finite() { (*v - lo) / span } else { 0.5 };
        }
    }
    Tensor::new(vec![h, w, 3], rgb)
}
