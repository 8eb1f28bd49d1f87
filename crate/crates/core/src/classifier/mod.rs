//! Per-pixel classifiers: boosted trees, random forests and two linear models.
//!
//! Class ids are 1-based; 0 is reserved for unlabelled pixels and never
//! appears in samples or predictions.

mod binning;
mod forest;
mod gbt;
mod linear;
mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::deep::formats::NamedTensorArchive;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::FeatureStack;

pub use forest::ForestParams;
pub use gbt::GbtParams;
pub use linear::LinearParams;

use binning::BinnedMatrix;
use forest::ForestModel;
use gbt::GbtModel;
use linear::LinearModel;
use tree::Tree;

pub const MAX_CLASSES: usize = 255;
const PREDICT_BLOCK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Gbt,
    RandomForest,
    Logistic,
    Linear,
    /// Reserved tag; fitting it is an error.
    Mlp,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [Self::Gbt, Self::RandomForest, Self::Logistic, Self::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gbt => "gbt",
            Self::RandomForest => "random_forest",
            Self::Logistic => "logistic",
            Self::Linear => "linear",
            Self::Mlp => "mlp",
        }
    }

    pub fn is_tree_based(self) -> bool {
        matches!(self, Self::Gbt | Self::RandomForest)
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gbt" => Ok(Self::Gbt),
            "random_forest" | "rf" => Ok(Self::RandomForest),
            "logistic" => Ok(Self::Logistic),
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::UnsupportedKind(other.to_string())),
        }
    }
}

/// Training rows `[M, F]` with labels in `1..=class_count`.
#[derive(Clone, Debug)]
pub struct LabeledSamples {
    features: Tensor,
    labels: Vec<u8>,
    class_count: usize,
}

impl LabeledSamples {
    pub fn new(features: Tensor, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        let (m, _) = features.matrix()?;
        if labels.len() != m {
            return Err(Error::shape(format!("{} labels for {m} samples", labels.len())));
        }
        if class_count == 0 || class_count > MAX_CLASSES {
            return Err(Error::arg(format!("class count {class_count} outside 1..={MAX_CLASSES}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > class_count) {
            return Err(Error::arg(format!("label {bad} outside 1..={class_count}")));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.features.dims()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct TrainConfig {
    pub gbt: GbtParams,
    pub random_forest: ForestParams,
    pub logistic: LinearParams,
    pub linear: LinearParams,
    pub seed: u64,
}


impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gbt;
        if g.n_rounds == 0 || g.max_depth == 0 {
            return Err(Error::arg("gbt needs n_rounds >= 1 and max_depth >= 1"));
        }
        if g.learning_rate.is_nan() || g.learning_rate <= 0.0 || g.lambda < 0.0 || g.min_child_weight < 0.0 || g.gamma < 0.0 {
            return Err(Error::arg("gbt learning_rate must be positive and lambda, gamma, min_child_weight non-negative"));
        }
        let rf = &self.random_forest;
        if rf.n_trees == 0 || rf.max_depth == Some(0) || rf.features_per_split == Some(0) {
            return Err(Error::arg("random_forest counts must be positive"));
        }
        for (name, p) in [("logistic", &self.logistic), ("linear", &self.linear)] {
            if p.max_iter == 0 || p.l2.is_nan() || p.l2 < 0.0 {
                return Err(Error::arg(format!("{name} needs max_iter >= 1 and l2 >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Params {
    /// Every input maps to this 1-based class.
    Constant(u8),
    Gbt(GbtModel),
    Forest(ForestModel),
    Linear(LinearModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    kind: ClassifierKind,
    class_count: usize,
    feature_arity: usize,
    training_time_s: f64,
    /// Raw split-gain totals per feature; `None` for linear kinds.
    gains: Option<Vec<f64>>,
    params: Params,
}

/// Hard labels (1-based) plus row-major `[M, C]` probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub probabilities: Vec<f32>,
    pub class_count: usize,
}

/// Sorts rows by (label, features) so the learners see the same order for
/// any permutation of the input.
fn canonical_order(samples: &LabeledSamples) -> Vec<usize> {
    let f = samples.arity();
    let data = samples.features.data();
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| {
        samples.labels[a].cmp(&samples.labels[b]).then_with(|| {
            let (ra, rb) = (&data[a * f..(a + 1) * f], &data[b * f..(b + 1) * f]);
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    idx
}

pub fn fit(samples: &LabeledSamples, kind: ClassifierKind, config: &TrainConfig) -> Result<ClassifierModel> {
    config.validate()?;
    if kind == ClassifierKind::Mlp {
        return Err(Error::UnsupportedKind("mlp is reserved and not implemented".into()));
    }
    if samples.features.data().iter().any(|v| v.is_nan()) {
        return Err(Error::arg("NaN in training features"));
    }
    let start = Instant::now();
    let f = samples.arity();
    let c = samples.class_count;
    let order = canonical_order(samples);
    let src = samples.features.data();
    let mut data = Vec::with_capacity(order.len() * f);
    for &i in &order {
        data.extend_from_slice(&src[i * f..(i + 1) * f]);
    }
    let labels: Vec<usize> = order.iter().map(|&i| samples.labels[i] as usize - 1).collect();
    let m = labels.len();

    let first = labels[0];
    let mut gains = vec![0.0f64; f];
    let params = if labels.iter().all(|&l| l == first) {
        Params::Constant(first as u8 + 1)
    } else {
        match kind {
            ClassifierKind::Gbt => {
                let binned = BinnedMatrix::build(&data, m, f);
                Params::Gbt(gbt::train(&binned, &labels, c, &config.gbt, &mut gains))
            }
            ClassifierKind::RandomForest => {
                let binned = BinnedMatrix::build(&data, m, f);
                Params::Forest(forest::train(&binned, &labels, c, &config.random_forest, config.seed, &mut gains))
            }
            ClassifierKind::Logistic => Params::Linear(linear::train_logistic(&data, &labels, f, c, &config.logistic)),
            ClassifierKind::Linear => Params::Linear(linear::train_linear(&data, &labels, f, c, &config.linear)),
            ClassifierKind::Mlp => unreachable!(),
        }
    };
    let training_time_s = start.elapsed().as_secs_f64();
    log::debug!("fit {kind} on {m}x{f}, {c} classes, {training_time_s:.3}s");
    Ok(ClassifierModel {
        kind,
        class_count: c,
        feature_arity: f,
        training_time_s,
        gains: kind.is_tree_based().then_some(gains),
        params,
    })
}

/// Index of the largest value, first one on ties.
fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ClassifierModel {
    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_arity(&self) -> usize {
        self.feature_arity
    }

    pub fn training_time_s(&self) -> f64 {
        self.training_time_s
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.params, Params::Constant(_))
    }

    /// Class probabilities for one row of length `feature_arity`.
    pub fn probabilities_into(&self, row: &[f32], out: &mut [f32]) {
        match &self.params {
            Params::Constant(class) => {
                out.fill(0.0);
                out[*class as usize - 1] = 1.0;
            }
            Params::Gbt(m) => {
                let mut margins = vec![0.0f32; self.class_count];
                m.margins(row, &mut margins);
                gbt::softmax_into(&margins, out);
            }
            Params::Forest(m) => m.probabilities(row, out),
            Params::Linear(m) => m.probabilities(row, out),
        }
    }

    /// Predicts every row of `data` (row-major, `feature_arity` wide),
    /// processing blocks of rows in parallel.
    pub fn predict_rows(&self, data: &[f32]) -> Result<Prediction> {
        let f = self.feature_arity;
        if !data.len().is_multiple_of(f) {
            return Err(Error::shape(format!("buffer of {} is not a multiple of arity {f}", data.len())));
        }
        let m = data.len() / f;
        let c = self.class_count;
        let mut labels = vec![0u8; m];
        let mut probabilities = vec![0.0f32; m * c];
        labels
            .par_chunks_mut(PREDICT_BLOCK)
            .zip(probabilities.par_chunks_mut(PREDICT_BLOCK * c))
            .zip(data.par_chunks(PREDICT_BLOCK * f))
            .for_each(|((lab, prob), rows)| {
                for ((l, p), row) in lab.iter_mut().zip(prob.chunks_mut(c)).zip(rows.chunks(f)) {
                    self.probabilities_into(row, p);
                    *l = argmax(p) as u8 + 1;
                }
            });
        Ok(Prediction {
            labels,
            probabilities,
            class_count: c,
        })
    }

    /// Accepts `[M, F]` samples or an `[H, W, F]` raster.
    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let arity = *features.dims().last().unwrap_or(&0);
        if !(features.rank() == 2 || features.rank() == 3) || arity != self.feature_arity {
            return Err(Error::shape(format!(
                "model expects {} features, got tensor {:?}",
                self.feature_arity,
                features.dims()
            )));
        }
        self.predict_rows(features.data())
    }

    pub fn predict_stack(&self, stack: &FeatureStack) -> Result<Prediction> {
        self.predict(stack.raster())
    }

    /// Split-gain attribution normalised to sum to 1.
    pub fn feature_importances(&self) -> Result<Vec<f64>> {
        let gains = self
            .gains
            .as_ref()
            .ok_or_else(|| Error::UnsupportedKind(format!("{} has no feature importances", self.kind)))?;
        let total: f64 = gains.iter().sum();
        if total > 0.0 {
            Ok(gains.iter().map(|g| g / total).collect())
        } else {
            Ok(vec![1.0 / self.feature_arity as f64; self.feature_arity])
        }
    }

    pub fn to_archive(&self) -> Result<NamedTensorArchive> {
        let mut manifest = json!({
            "format_version": 1,
            "kind": "classifier",
            "classifier_kind": self.kind.as_str(),
            "class_count": self.class_count,
            "feature_arity": self.feature_arity,
            "training_time_s": self.training_time_s,
            "gains": self.gains,
        });
        let mut archive = NamedTensorArchive::new(serde_json::Value::Null);
        let push_trees = |trees: &[Tree], archive: &mut NamedTensorArchive| -> Result<()> {
            for (t, tree) in trees.iter().enumerate() {
                let (split, leaf) = tree.to_tensors()?;
                archive.push(format!("tree.{t}.split"), split);
                archive.push(format!("tree.{t}.leaf"), leaf);
            }
            Ok(())
        };
        match &self.params {
            Params::Constant(class) => manifest["constant_class"] = json!(class),
            Params::Gbt(m) => {
                manifest["n_trees"] = json!(m.trees.len());
                push_trees(&m.trees, &mut archive)?;
            }
            Params::Forest(m) => {
                manifest["n_trees"] = json!(m.trees.len());
                push_trees(&m.trees, &mut archive)?;
            }
            Params::Linear(m) => {
                let (f, c) = (self.feature_arity, self.class_count);
                archive.push("weights", Tensor::new(vec![f, c], m.weights.clone())?);
                archive.push("bias", Tensor::new(vec![c], m.bias.clone())?);
                archive.push("feature_mean", Tensor::new(vec![f], m.mean.clone())?);
                archive.push("feature_scale", Tensor::new(vec![f], m.scale.clone())?);
            }
        }
        archive.manifest = manifest;
        Ok(archive)
    }

    pub fn from_archive(archive: &NamedTensorArchive) -> Result<Self> {
        let man = &archive.manifest;
        if man.get("kind").and_then(|v| v.as_str()) != Some("classifier") {
            return Err(Error::Archive("manifest kind is not \"classifier\"".into()));
        }
        if man.get("format_version").and_then(|v| v.as_u64()) != Some(1) {
            return Err(Error::Archive("unsupported classifier format version".into()));
        }
        let field = |name: &str| -> Result<&serde_json::Value> {
            man.get(name).ok_or_else(|| Error::Archive(format!("manifest missing {name:?}")))
        };
        let kind: ClassifierKind = field("classifier_kind")?
            .as_str()
            .ok_or_else(|| Error::Archive("classifier_kind is not a string".into()))?
            .parse()?;
        let as_usize = |name: &str| -> Result<usize> {
            field(name)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Archive(format!("{name:?} is not an integer")))
        };
        let class_count = as_usize("class_count")?;
        let feature_arity = as_usize("feature_arity")?;
        if class_count == 0 || class_count > MAX_CLASSES || feature_arity == 0 {
            return Err(Error::Archive("invalid class count or arity".into()));
        }
        let training_time_s = field("training_time_s")?.as_f64().unwrap_or(0.0);
        let gains: Option<Vec<f64>> = serde_json::from_value(field("gains")?.clone())?;
        if gains.as_ref().is_some_and(|g| g.len() != feature_arity) {
            return Err(Error::Archive("gains length differs from arity".into()));
        }
        let load_trees = |width: usize| -> Result<Vec<Tree>> {
            let n = as_usize("n_trees")?;
            (0..n)
                .map(|t| {
                    let tree = Tree::from_tensors(
                        archive.require(&format!("tree.{t}.split"))?,
                        archive.require(&format!("tree.{t}.leaf"))?,
                    )?;
                    if tree.width != width || tree.feature.iter().any(|&f| f >= feature_arity as i32) {
                        return Err(Error::Archive(format!("tree {t} does not fit the model shape")));
                    }
                    Ok(tree)
                })
                .collect()
        };
        let params = if let Some(class) = man.get("constant_class") {
            let class = class.as_u64().unwrap_or(0) as usize;
            if class == 0 || class > class_count {
                return Err(Error::Archive("constant class out of range".into()));
            }
            Params::Constant(class as u8)
        } else {
            match kind {
                ClassifierKind::Gbt => Params::Gbt(GbtModel {
                    trees: load_trees(1)?,
                    classes: class_count,
                }),
                ClassifierKind::RandomForest => Params::Forest(ForestModel {
                    trees: load_trees(class_count)?,
                    classes: class_count,
                }),
                ClassifierKind::Logistic | ClassifierKind::Linear => {
                    let get = |name: &str, dims: Vec<usize>| -> Result<Vec<f32>> {
                        let t = archive.require(name)?;
                        if t.dims() != dims.as_slice() {
                            return Err(Error::Archive(format!("{name} has dims {:?}, expected {dims:?}", t.dims())));
                        }
                        Ok(t.data().to_vec())
                    };
                    Params::Linear(LinearModel {
                        weights: get("weights", vec![feature_arity, class_count])?,
                        bias: get("bias", vec![class_count])?,
                        mean: get("feature_mean", vec![feature_arity])?,
                        scale: get("feature_scale", vec![feature_arity])?,
                        classes: class_count,
                    })
                }
                ClassifierKind::Mlp => return Err(Error::UnsupportedKind("mlp".into())),
            }
        };
        Ok(Self {
            kind,
            class_count,
            feature_arity,
            training_time_s,
            gains,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive()?.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&NamedTensorArchive::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&NamedTensorArchive::read(path)?)
    }
}

pub fn predict(model: &ClassifierModel, features: &Tensor) -> Result<Prediction> {
    model.predict(features)
}

pub fn feature_importances(model: &ClassifierModel) -> Result<Vec<f64>> {
    model.feature_importances()
}
