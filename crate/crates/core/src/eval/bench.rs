use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::miou::{miou, MiouVariant};
use crate::classifier::{fit, ClassifierKind, LabeledSamples, TrainConfig};
use crate::engine::{add_baseline_channels, predict_parts, BaselineKind};
use crate::error::{Error, Result};
use crate::features::{featurize_classical, FeatureSetConfig, FeatureStack};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub count: usize,
}

/// One column of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVariant {
    pub name: String,
    #[serde(default)]
    pub deep: bool,
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub baseline: Option<BaselineSpec>,
}

impl FeatureVariant {
    pub fn classical() -> Self {
        Self {
            name: "classical".into(),
            deep: false,
            j: None,
            baseline: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub dataset: PathBuf,
    pub n_train_images: usize,
    /// When set, every listed training-set size is run (learning curve).
    pub sweep: Option<Vec<usize>>,
    pub variants: Vec<FeatureVariant>,
    pub kinds: Vec<ClassifierKind>,
    pub seeds: Vec<u64>,
    pub miou_variant: MiouVariant,
    pub feature_config: FeatureSetConfig,
    pub train: TrainConfig,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            n_train_images: 4,
            sweep: None,
            variants: vec![FeatureVariant::classical()],
            kinds: vec![ClassifierKind::Gbt],
            seeds: vec![0],
            miou_variant: MiouVariant::Iou,
            feature_config: FeatureSetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl BenchmarkSpec {
    fn train_sizes(&self) -> Vec<usize> {
        self.sweep.clone().unwrap_or_else(|| vec![self.n_train_images])
    }

    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if self.variants.is_empty() || self.kinds.is_empty() || self.seeds.is_empty() {
            return Err(Error::arg("benchmark needs at least one variant, classifier kind and seed"));
        }
        for n in self.train_sizes() {
            if n == 0 || n > dataset_size {
                return Err(Error::arg(format!("n_train_images {n} outside 1..={dataset_size}")));
            }
        }
        self.feature_config.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image: String,
    pub train: bool,
    pub per_class: Vec<Option<f64>>,
    pub class_avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub kind: ClassifierKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_samples: usize,
    pub feature_arity: usize,
    pub images: Vec<ImageScore>,
    /// Mean and population standard deviation of `class_avg` across images.
    pub mean: f64,
    pub std: f64,
    pub train_time_s: f64,
    pub apply_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub miou_variant: MiouVariant,
    pub class_count: usize,
    pub runs: Vec<RunReport>,
    pub skipped: Vec<SkippedImage>,
    pub featurize_time_s: f64,
    pub spec: BenchmarkSpec,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkReport> {
    let dataset = Dataset::load(&spec.dataset)?;
    run_benchmark_on(&dataset, spec)
}

/// Runs `spec` against an already loaded dataset; `spec.dataset` is only echoed.
pub fn run_benchmark_on(dataset: &Dataset, spec: &BenchmarkSpec) -> Result<BenchmarkReport> {
    spec.validate(dataset.images.len())?;
    let c = dataset.class_count;
    let mut skipped = Vec::new();
    for im in &dataset.images {
        if im.gt.is_none() {
            log::warn!("{}: no ground truth, excluded from scoring", im.stem);
            skipped.push(SkippedImage {
                image: im.stem.clone(),
                reason: "missing ground truth".into(),
            });
        } else if let Some(gt) = &im.gt {
            if gt.grid().contains(&0) {
                log::warn!("{}: ground truth has unlabelled pixels, excluded from scoring", im.stem);
                skipped.push(SkippedImage {
                    image: im.stem.clone(),
                    reason: "ground truth contains unlabelled pixels".into(),
                });
            }
        }
    }
    let scored: Vec<usize> = (0..dataset.images.len())
        .filter(|&i| !skipped.iter().any(|s| s.image == dataset.images[i].stem))
        .collect();
    if scored.is_empty() {
        return Err(Error::arg("no image in the dataset has usable ground truth"));
    }

    let t0 = Instant::now();
    let classical: Vec<FeatureStack> = dataset
        .images
        .iter()
        .map(|im| featurize_classical(&im.image, &spec.feature_config))
        .collect::<Result<_>>()?;
    let featurize_time_s = t0.elapsed().as_secs_f64();

    let mut runs = Vec::new();
    for variant in &spec.variants {
        for &seed in &spec.seeds {
            let stacks = variant_stacks(dataset, &classical, variant, seed)?;
            for &kind in &spec.kinds {
                for n_train in spec.train_sizes() {
                    runs.push(run_one(dataset, &stacks, &scored, variant, kind, seed, n_train, spec, c)?);
                }
            }
        }
    }
    Ok(BenchmarkReport {
        miou_variant: spec.miou_variant,
        class_count: c,
        runs,
        skipped,
        featurize_time_s,
        spec: spec.clone(),
    })
}

/// Per-image (classical stack, optional deep part with its channel count).
type VariantStacks<'a> = Vec<(FeatureStack, Option<(&'a FeatureStack, usize)>)>;

fn variant_stacks<'a>(
    dataset: &'a Dataset,
    classical: &[FeatureStack],
    variant: &FeatureVariant,
    seed: u64,
) -> Result<VariantStacks<'a>> {
    dataset
        .images
        .iter()
        .zip(classical)
        .enumerate()
        .map(|(i, (im, cls))| {
            let base = match variant.baseline {
                Some(b) => {
                    let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
                    add_baseline_channels(cls, b.kind, b.count, s)?
                }
                None => cls.clone(),
            };
            let deep = if variant.deep {
                let d = im.deep.as_ref().ok_or_else(|| {
                    Error::State(format!("variant {:?} needs deep features but {} has none", variant.name, im.stem))
                })?;
                let j = variant.j.unwrap_or(d.channels());
                if j == 0 || j > d.channels() {
                    return Err(Error::arg(format!("j={j} outside 1..={}", d.channels())));
                }
                Some((d, j))
            } else {
                None
            };
            Ok((base, deep))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    dataset: &Dataset,
    stacks: &VariantStacks<'_>,
    scored: &[usize],
    variant: &FeatureVariant,
    kind: ClassifierKind,
    seed: u64,
    n_train: usize,
    spec: &BenchmarkSpec,
    c: usize,
) -> Result<RunReport> {
    let f = stacks[0].0.channels() + stacks[0].1.map_or(0, |(_, j)| j);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (im, (base, deep)) in dataset.images.iter().zip(stacks).take(n_train) {
        let Some(map) = &im.labels else {
            log::warn!("{}: no sparse labels, contributes no training samples", im.stem);
            continue;
        };
        let w = map.width();
        for (p, &l) in map.grid().iter().enumerate() {
            if l > 0 {
                data.extend_from_slice(base.pixel(p / w, p % w));
                if let Some((d, j)) = deep {
                    data.extend_from_slice(&d.pixel(p / w, p % w)[..*j]);
                }
                labels.push(l);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::State(format!("no labelled pixels in the first {n_train} images")));
    }
    let n_samples = labels.len();
    let samples = LabeledSamples::new(Tensor::new(vec![n_samples, f], data)?, labels, c)?;
    let model = fit(&samples, kind, &spec.train.clone().with_seed(seed))?;
    let t_apply = Instant::now();
    let images: Vec<ImageScore> = scored
        .par_iter()
        .map(|&i| {
            let (base, deep) = &stacks[i];
            let seg = predict_parts(&model, base, *deep)?;
            let gt = dataset.images[i].gt.as_ref().expect("scored images have ground truth");
            let r = miou(&seg.labels, gt.grid(), c, spec.miou_variant)?;
            Ok(ImageScore {
                image: dataset.images[i].stem.clone(),
                train: i < n_train,
                per_class: r.per_class,
                class_avg: r.class_avg,
            })
        })
        .collect::<Result<_>>()?;
    let (mean, std) = mean_std(&images.iter().map(|s| s.class_avg).collect::<Vec<_>>());
    Ok(RunReport {
        variant: variant.name.clone(),
        kind,
        seed,
        n_train,
        n_samples,
        feature_arity: f,
        images,
        mean,
        std,
        train_time_s: model.training_time_s(),
        apply_time_s: t_apply.elapsed().as_secs_f64(),
    })
}

/// Plain-text table: one row per (variant, kind, n_train), averaged over seeds.
pub fn render_table(report: &BenchmarkReport) -> String {
    let mut keys: Vec<(String, ClassifierKind, usize)> = Vec::new();
    for r in &report.runs {
        let k = (r.variant.clone(), r.kind, r.n_train);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "class-avg m{} (mean ± std across images)", report.miou_variant.as_str().to_uppercase());
    let _ = writeln!(out, "{:<24} {:<14} {:>7} {:>6}  {:<16}", "variant", "classifier", "n_train", "seeds", "score");
    for (variant, kind, n) in keys {
        let runs: Vec<&RunReport> = report
            .runs
            .iter()
            .filter(|r| r.variant == variant && r.kind == kind && r.n_train == n)
            .collect();
        let m = runs.iter().map(|r| r.mean).sum::<f64>() / runs.len() as f64;
        let s = runs.iter().map(|r| r.std).sum::<f64>() / runs.len() as f64;
        let _ = writeln!(out, "{variant:<24} {:<14} {n:>7} {:>6}  {m:.3} ± {s:.3}", kind.as_str(), runs.len());
    }
    for s in &report.skipped {
        let _ = writeln!(out, "skipped {}: {}", s.image, s.reason);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synthetic::{synthetic_dataset, Phases, SyntheticSpec};

    fn quick_spec() -> BenchmarkSpec {
        let mut train = TrainConfig::default();
        train.gbt.n_rounds = 20;
        BenchmarkSpec {
            n_train_images: 2,
            feature_config: FeatureSetConfig {
                sigmas: vec![0.0, 1.0, 2.0],
                membrane_kernel_size: 7,
                ..Default::default()
            },
            train,
            ..Default::default()
        }
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn threshold_dataset_scores_high_and_reproducibly() {
        let ds = synthetic_dataset(&SyntheticSpec {
            n_images: 4,
            height: 40,
            width: 40,
            oracle_noise: Some(0.25),
            ..Default::default()
        })
        .unwrap();
        let mut spec = quick_spec();
        spec.variants.push(FeatureVariant {
            name: "+oracle".into(),
            deep: true,
            j: None,
            baseline: None,
        });
        let a = run_benchmark_on(&ds, &spec).unwrap();
        let b = run_benchmark_on(&ds, &spec).unwrap();
        assert_eq!(a.runs.len(), 2);
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.images, y.images);
            assert!(x.mean >= 0.95, "{}: {}", x.variant, x.mean);
            assert_eq!(x.images.len(), 4);
        }
        assert!((a.runs[0].mean - a.runs[1].mean).abs() <= 0.02);
        let table = render_table(&a);
        assert!(table.contains("+oracle"), "{table}");
    }

    #[test]
    fn missing_ground_truth_is_skipped_and_sweep_runs() {
        let mut ds = synthetic_dataset(&SyntheticSpec {
            n_images: 3,
            height: 32,
            width: 32,
            phases: Phases::Intensity,
            ..Default::default()
        })
        .unwrap();
        ds.images[2].gt = None;
        let mut spec = quick_spec();
        spec.sweep = Some(vec![1, 2]);
        let r = run_benchmark_on(&ds, &spec).unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.runs.iter().map(|r| r.n_train).collect::<Vec<_>>(), vec![1, 2]);
        assert!(r.runs.iter().all(|run| run.images.len() == 2));
    }

    #[test]
    fn spec_validation() {
        let ds = synthetic_dataset(&SyntheticSpec {
            n_images: 2,
            height: 32,
            width: 32,
            ..Default::default()
        })
        .unwrap();
        let mut spec = quick_spec();
        spec.n_train_images = 3;
        assert!(run_benchmark_on(&ds, &spec).is_err());
        spec.n_train_images = 1;
        spec.variants.clear();
        assert!(run_benchmark_on(&ds, &spec).is_err());
        let mut spec = quick_spec();
        spec.variants = vec![FeatureVariant {
            name: "deep".into(),
            deep: true,
            j: None,
            baseline: None,
        }];
        assert!(matches!(run_benchmark_on(&ds, &spec), Err(Error::State(_))));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = synthetic_dataset(&SyntheticSpec {
            n_images: 2,
            height: 40,
            width: 40,
            oracle_noise: Some(0.1),
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.class_count, 2);
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert_eq!(a.gt, b.gt);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.deep.as_ref().unwrap().raster().data(), b.deep.as_ref().unwrap().raster().data());
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        let mut spec = quick_spec();
        spec.dataset = dir.path().to_path_buf();
        let mean = run_benchmark(&spec).unwrap().runs[0].mean;
        assert!(mean > 0.9, "{mean}");
    }
}
