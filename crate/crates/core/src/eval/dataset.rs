//! Benchmark datasets on disk:
//!
//! ```text
//! <root>/manifest.json   {"class_count": C, "images": ["stem", ...]}  (train order)
//! <root>/images/<stem>.{png,tif,tiff}
//! <root>/labels/<stem>.png   sparse indexed labels, 0 = unlabelled
//! <root>/gt/<stem>.png       dense indexed ground truth
//! <root>/deep/<stem>.fts     optional full-resolution deep features [H, W, k]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deep::{read_fts, write_fts};
use crate::engine::{decode_image, encode_grey_png, encode_rgb_png, SparseLabelMap};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DatasetImage {
    pub stem: String,
    pub image: Tensor,
    pub labels: Option<SparseLabelMap>,
    pub gt: Option<SparseLabelMap>,
    pub deep: Option<FeatureStack>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_count: usize,
    pub images: Vec<DatasetImage>,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "tif", "tiff"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
        if manifest.images.is_empty() {
            return Err(Error::arg("dataset manifest lists no images"));
        }
        let c = manifest.class_count;
        let mut images = Vec::with_capacity(manifest.images.len());
        for stem in &manifest.images {
            let path = find_image(&root.join("images"), stem)
                .ok_or_else(|| Error::arg(format!("image {stem:?} not found under {}", root.join("images").display())))?;
            let image = decode_image(&fs::read(&path)?)?;
            let read_map = |dir: &str| -> Result<Option<SparseLabelMap>> {
                let p = root.join(dir).join(format!("{stem}.png"));
                if !p.is_file() {
                    return Ok(None);
                }
                Ok(Some(SparseLabelMap::from_png(&fs::read(&p)?, c)?))
            };
            let deep_path = root.join("deep").join(format!("{stem}.fts"));
            let deep = if deep_path.is_file() {
                let file = read_fts(&deep_path)?;
                if file.tensor.rank() != 3 || file.tensor.dims()[..2] != image.dims()[..2] {
                    return Err(Error::shape(format!(
                        "deep features for {stem:?} must be full resolution, got {:?}",
                        file.tensor.dims()
                    )));
                }
                Some(FeatureStack::with_prefix(file.tensor, "deep_")?)
            } else {
                None
            };
            images.push(DatasetImage {
                stem: stem.clone(),
                labels: read_map("labels")?,
                gt: read_map("gt")?,
                image,
                deep,
            });
        }
        Ok(Self {
            class_count: c,
            images,
        })
    }

    /// Writes the layout above. Images are quantised to 8 bits.
    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for d in ["images", "labels", "gt", "deep"] {
            fs::create_dir_all(root.join(d))?;
        }
        for im in &self.images {
            let png = if im.image.channels() == 3 {
                encode_rgb_png(&im.image)?
            } else {
                encode_grey_png(&im.image)?
            };
            fs::write(root.join("images").join(format!("{}.png", im.stem)), png)?;
            if let Some(l) = &im.labels {
                fs::write(root.join("labels").join(format!("{}.png", im.stem)), l.to_png()?)?;
            }
            if let Some(g) = &im.gt {
                fs::write(root.join("gt").join(format!("{}.png", im.stem)), g.to_png()?)?;
            }
            if let Some(d) = &im.deep {
                let (h, w) = (d.height() as u32, d.width() as u32);
                write_fts(root.join("deep").join(format!("{}.fts", im.stem)), d.raster(), 1, (h, w))?;
            }
        }
        let manifest = DatasetManifest {
            class_count: self.class_count,
            images: self.images.iter().map(|i| i.stem.clone()).collect(),
            class_names: Vec::new(),
        };
        fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}
