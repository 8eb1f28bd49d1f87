use serde::{Deserialize, Serialize};

use super::{predict_parts, sha256_hex, tensor_hash, Segmentation, SparseLabelMap};
use crate::classifier::{fit, ClassifierKind, ClassifierModel, LabeledSamples, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{featurize_classical, FeatureSetConfig, FeatureStack};
use crate::numerics::Tensor;

/// Identity of a deep-feature stack: which image, which extractor, how many
/// components and whether flips were averaged.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeepKey {
    pub image_hash: String,
    pub extractor_id: String,
    pub k: usize,
    pub flip_symmetrized: bool,
}

impl DeepKey {
    /// Short stable id, usable as a cache file stem.
    pub fn cache_id(&self) -> String {
        let flip = [self.flip_symmetrized as u8];
        sha256_hex(&[
            self.image_hash.as_bytes(),
            self.extractor_id.as_bytes(),
            &(self.k as u64).to_le_bytes(),
            &flip,
        ])[..16]
            .to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepCache {
    pub key: DeepKey,
    pub stack: FeatureStack,
    /// Content hash of `stack`.
    pub hash: String,
}

impl DeepCache {
    pub fn new(key: DeepKey, stack: FeatureStack) -> Result<Self> {
        if stack.channels() != key.k {
            return Err(Error::shape(format!("deep stack has {} channels, key says k={}", stack.channels(), key.k)));
        }
        let hash = tensor_hash(stack.raster());
        Ok(Self { key, stack, hash })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub kind: ClassifierKind,
    pub use_deep: bool,
    pub j: Option<usize>,
    /// Labelled pixels per class, index 0 = class 1.
    pub class_counts: Vec<usize>,
    pub n_samples: usize,
    pub feature_arity: usize,
    pub training_time_s: f64,
    pub training_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub label_hash: String,
    pub metrics: TrainMetrics,
}

/// A fitted classifier plus the feature layout it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: ClassifierModel,
    pub use_deep: bool,
    pub j: Option<usize>,
    /// Hash of the feature inputs at training time.
    pub feature_hash: String,
}

/// One image with its feature caches, labels and current classifier.
#[derive(Clone, Debug)]
pub struct Project {
    image: Tensor,
    image_hash: String,
    config: FeatureSetConfig,
    classical: Option<(String, FeatureStack)>,
    deep: Option<DeepCache>,
    labels: SparseLabelMap,
    trained: Option<TrainedModel>,
    history: Vec<HistoryEntry>,
}

fn check_image(image: &Tensor, config: &FeatureSetConfig) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    if !(c == 1 || c == 3) {
        return Err(Error::shape(format!("image must have 1 or 3 channels, got {c}")));
    }
    let side = config.min_side();
    if h < side || w < side {
        return Err(Error::arg(format!("image {h}x{w} smaller than the {side}px filter support")));
    }
    Ok(())
}

impl Project {
    pub fn new(image: Tensor, config: FeatureSetConfig, class_count: usize) -> Result<Self> {
        config.validate()?;
        check_image(&image, &config)?;
        let (h, w, _) = image.hwc()?;
        Ok(Self {
            image_hash: tensor_hash(&image),
            labels: SparseLabelMap::new(h, w, class_count)?,
            image,
            config,
            classical: None,
            deep: None,
            trained: None,
            history: Vec::new(),
        })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn image_hash(&self) -> &str {
        &self.image_hash
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.labels.height(), self.labels.width())
    }

    pub fn config(&self) -> &FeatureSetConfig {
        &self.config
    }

    pub fn labels(&self) -> &SparseLabelMap {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.labels.class_count()
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn trained(&self) -> Option<&TrainedModel> {
        self.trained.as_ref()
    }

    pub fn model(&self) -> Option<&ClassifierModel> {
        self.trained.as_ref().map(|t| &t.model)
    }

    pub fn deep(&self) -> Option<&DeepCache> {
        self.deep.as_ref()
    }

    pub fn classical_cached(&self) -> Option<&FeatureStack> {
        self.classical.as_ref().map(|(_, s)| s)
    }

    /// Replaces the image. All feature caches are dropped; labels survive
    /// when the dimensions are unchanged.
    pub fn set_image(&mut self, image: Tensor) -> Result<()> {
        check_image(&image, &self.config)?;
        let (h, w, _) = image.hwc()?;
        if (h, w) != self.dims() {
            self.labels = SparseLabelMap::new(h, w, self.class_count())?;
        }
        self.image_hash = tensor_hash(&image);
        self.image = image;
        self.classical = None;
        self.deep = None;
        Ok(())
    }

    pub fn set_config(&mut self, config: FeatureSetConfig) -> Result<()> {
        config.validate()?;
        check_image(&self.image, &config)?;
        if config != self.config {
            self.config = config;
            self.classical = None;
        }
        Ok(())
    }

    /// Replaces the labels; feature caches are unaffected.
    pub fn set_labels(&mut self, labels: SparseLabelMap) -> Result<()> {
        if (labels.height(), labels.width()) != self.dims() {
            return Err(Error::shape(format!(
                "labels are {}x{}, image is {}x{}",
                labels.height(),
                labels.width(),
                self.dims().0,
                self.dims().1
            )));
        }
        self.labels = labels;
        Ok(())
    }

    /// Hash of (image, feature config); the key of the classical cache.
    pub fn classical_hash(&self) -> String {
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        sha256_hex(&[self.image_hash.as_bytes(), &cfg])
    }

    /// Whether the cached classical stack was computed from the current
    /// image and config.
    pub fn classical_is_current(&self) -> bool {
        self.classical.as_ref().is_some_and(|(h, _)| *h == self.classical_hash())
    }

    pub fn ensure_classical(&mut self) -> Result<&FeatureStack> {
        let want = self.classical_hash();
        if self.classical.as_ref().is_none_or(|(h, _)| *h != want) {
            let stack = featurize_classical(&self.image, &self.config)?;
            self.classical = Some((want, stack));
        }
        Ok(&self.classical.as_ref().expect("just filled").1)
    }

    /// Installs a previously computed classical stack if `hash` matches the
    /// current inputs. Returns whether it was accepted.
    pub fn restore_classical(&mut self, hash: &str, stack: FeatureStack) -> bool {
        let (h, w) = self.dims();
        if hash != self.classical_hash()
            || stack.height() != h
            || stack.width() != w
            || stack.channels() != self.config.channel_count()
        {
            return false;
        }
        self.classical = Some((hash.to_string(), stack));
        true
    }

    /// Attaches a full-resolution deep stack computed for this image.
    pub fn attach_deep(&mut self, cache: DeepCache) -> Result<()> {
        if cache.key.image_hash != self.image_hash {
            return Err(Error::State("deep features were computed for a different image".into()));
        }
        if (cache.stack.height(), cache.stack.width()) != self.dims() {
            return Err(Error::shape(format!(
                "deep stack is {}x{}, image is {}x{}",
                cache.stack.height(),
                cache.stack.width(),
                self.dims().0,
                self.dims().1
            )));
        }
        self.deep = Some(cache);
        Ok(())
    }

    pub fn clear_deep(&mut self) {
        self.deep = None;
    }

    fn deep_channels(&self, use_deep: bool, j: Option<usize>) -> Result<Option<(&FeatureStack, usize)>> {
        if !use_deep {
            return Ok(None);
        }
        let deep = self.deep.as_ref().ok_or_else(|| {
            Error::State("no deep feature cache for this image; run deep feature extraction or attach an FTS1 file first".into())
        })?;
        let k = deep.stack.channels();
        let j = j.unwrap_or(k);
        if j == 0 || j > k {
            return Err(Error::arg(format!("j={j} outside 1..={k}")));
        }
        Ok(Some((&deep.stack, j)))
    }

    /// Hash of everything the feature vectors depend on for a given layout.
    pub fn feature_hash(&self, use_deep: bool, j: Option<usize>) -> Result<String> {
        let deep = self.deep_channels(use_deep, j)?;
        let deep_part = match deep {
            Some((_, j)) => format!("{}:{j}", self.deep.as_ref().expect("checked").hash),
            None => String::new(),
        };
        Ok(sha256_hex(&[self.classical_hash().as_bytes(), deep_part.as_bytes()]))
    }

    /// Classical channels followed by the first `j` (default all) deep channels.
    pub fn build_feature_stack(&mut self, use_deep: bool, j: Option<usize>) -> Result<FeatureStack> {
        self.deep_channels(use_deep, j)?;
        self.ensure_classical()?;
        let classical = self.classical_cached().expect("ensured");
        match self.deep_channels(use_deep, j)? {
            None => Ok(classical.clone()),
            Some((deep, j)) => {
                let head = if j == deep.channels() { deep.clone() } else { deep.slice(0, j)? };
                FeatureStack::concat(&[classical, &head])
            }
        }
    }

    /// Feature rows and labels at every labelled pixel.
    pub fn gather_samples(&mut self, use_deep: bool, j: Option<usize>) -> Result<LabeledSamples> {
        self.deep_channels(use_deep, j)?;
        self.ensure_classical()?;
        let classical = self.classical_cached().expect("ensured");
        let deep = self.deep_channels(use_deep, j)?;
        let f = classical.channels() + deep.map_or(0, |(_, j)| j);
        let (_, w) = self.dims();
        let mut data = Vec::with_capacity(self.labels.labelled_count() * f);
        let mut labels = Vec::with_capacity(self.labels.labelled_count());
        for (p, &l) in self.labels.grid().iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (y, x) = (p / w, p % w);
            data.extend_from_slice(classical.pixel(y, x));
            if let Some((d, j)) = deep {
                data.extend_from_slice(&d.pixel(y, x)[..j]);
            }
            labels.push(l);
        }
        let m = labels.len();
        LabeledSamples::new(Tensor::new(vec![m, f], data)?, labels, self.class_count())
    }

    pub fn train_on_labels(
        &mut self,
        kind: ClassifierKind,
        config: &TrainConfig,
        use_deep: bool,
        j: Option<usize>,
    ) -> Result<(ClassifierModel, TrainMetrics)> {
        let counts = self.labels.class_counts();
        let used = counts.iter().filter(|&&c| c > 0).count();
        if used < 2 {
            return Err(Error::State(format!(
                "labels cover {used} class(es); draw labels for at least two classes before training"
            )));
        }
        let samples = self.gather_samples(use_deep, j)?;
        let model = fit(&samples, kind, config)?;
        let pred = model.predict(samples.features())?;
        let correct = pred.labels.iter().zip(samples.labels()).filter(|(a, b)| a == b).count();
        let metrics = TrainMetrics {
            kind,
            use_deep,
            j,
            class_counts: counts,
            n_samples: samples.len(),
            feature_arity: samples.arity(),
            training_time_s: model.training_time_s(),
            training_accuracy: correct as f64 / samples.len() as f64,
        };
        self.trained = Some(TrainedModel {
            model: model.clone(),
            use_deep,
            j,
            feature_hash: self.feature_hash(use_deep, j)?,
        });
        self.history.push(HistoryEntry {
            label_hash: sha256_hex(&[self.labels.grid()]),
            metrics: metrics.clone(),
        });
        Ok((model, metrics))
    }

    /// Installs a model loaded from storage. Staleness is checked at
    /// segmentation time.
    pub fn set_trained(&mut self, trained: TrainedModel) -> Result<()> {
        if trained.model.class_count() != self.class_count() {
            return Err(Error::State("model class count differs from the project's".into()));
        }
        self.trained = Some(trained);
        Ok(())
    }

    pub fn set_history(&mut self, history: Vec<HistoryEntry>) {
        self.history = history;
    }

    /// Applies the current model to every pixel. Labelled pixels get the
    /// classifier's output like any other.
    pub fn segment(&mut self) -> Result<Segmentation> {
        self.ensure_classical()?;
        self.segment_cached()
    }

    /// Like [`Project::segment`] but never computes features; a missing
    /// classical cache is a state error. Usable behind a shared reference.
    pub fn segment_cached(&self) -> Result<Segmentation> {
        let trained = self
            .trained
            .as_ref()
            .ok_or_else(|| Error::State("no trained classifier; train on labels first".into()))?;
        let (use_deep, j) = (trained.use_deep, trained.j);
        let current = self.feature_hash(use_deep, j)?;
        if current != trained.feature_hash {
            return Err(Error::State(
                "feature cache is stale: image, feature config or deep features changed since training; retrain".into(),
            ));
        }
        let classical = self
            .classical_cached()
            .filter(|_| self.classical_is_current())
            .ok_or_else(|| Error::State("classical features not computed for the current image".into()))?;
        let deep = self.deep_channels(use_deep, j)?;
        predict_parts(&trained.model, classical, deep)
    }
}
