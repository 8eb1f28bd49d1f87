use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-pixel descriptor vectors over an `H x W` grid with named channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    raster: Tensor,
    /// Channels are principal components in descending-variance order
    /// (shared-PCA deep features); visualisation can use them directly.
    pub variance_ordered: bool,
}

impl FeatureStack {
    pub fn new(raster: Tensor) -> Result<Self> {
        raster.hwc()?;
        if raster.rank() != 3 {
            return Err(Error::shape("feature stack must be [H,W,F]"));
        }
        if raster.channel_names().is_none() {
            return Err(Error::arg("feature stack channels must be named"));
        }
        Ok(Self {
            raster,
            variance_ordered: false,
        })
    }

    /// Wraps `raster`, naming channels `{prefix}{i}`.
    pub fn with_prefix(raster: Tensor, prefix: &str) -> Result<Self> {
        let c = raster.hwc()?.2;
        let names = (0..c).map(|i| format!("{prefix}{i}")).collect();
        Self::new(raster.with_channel_names(names)?)
    }

    pub fn raster(&self) -> &Tensor {
        &self.raster
    }

    pub fn into_raster(self) -> Tensor {
        self.raster
    }

    pub fn height(&self) -> usize {
        self.raster.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.raster.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.raster.dims()[2]
    }

    pub fn names(&self) -> &[String] {
        self.raster.channel_names().expect("feature stacks carry names")
    }

    /// Feature vector of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let f = self.channels();
        let i = (y * self.width() + x) * f;
        &self.raster.data()[i..i + f]
    }

    /// Channels side by side; every part must share `(H, W)` and names must
    /// stay unique.
    pub fn concat(parts: &[&FeatureStack]) -> Result<Self> {
        let rasters: Vec<&Tensor> = parts.iter().map(|p| &p.raster).collect();
        Self::new(Tensor::concat_channels(&rasters)?)
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let mut s = Self::new(self.raster.slice_channels(start, end)?)?;
        s.variance_ordered = self.variance_ordered && start == 0;
        Ok(s)
    }
}
