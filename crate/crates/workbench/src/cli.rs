use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use featseg_core::deep::{load_feature_file, visualize_pca_rgb};
use featseg_core::engine::{encode_rgb_png, load_image, RleRecord};
use featseg_core::eval::synthetic::{synthetic_dataset, Phases, SyntheticSpec};
use featseg_core::eval::{render_table, run_benchmark, BenchmarkSpec};
use featseg_core::{ClassifierKind, Project, SparseLabelMap};
use serde::Deserialize;

use crate::config::Config;
use crate::deep::{cache_for, extract_with_sidecar, load_weights, to_full_resolution, DeepRequest};
use crate::service::{serve, AppState};
use crate::store::{ProjectSettings, ProjectStore, StoredProject};

#[derive(Debug, Parser)]
#[command(name = "featseg", version, about = "Interactive micrograph segmentation workbench")]
pub struct Cli {
    /// TOML config file (also FEATSEG_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Project store directory (also FEATSEG_STORE).
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or update a project from an image and compute its feature caches.
    Featurize(FeaturizeArgs),
    /// Replace a project's labels from an indexed PNG or RLE JSON file.
    Labels(LabelsArgs),
    /// Train a pixel classifier on the project's labels.
    Train(TrainArgs),
    /// Segment the project's image with its trained classifier.
    Segment(SegmentArgs),
    /// Run a benchmark spec (TOML) and write its JSON report.
    Bench(BenchArgs),
    /// Render the first three principal components of a feature stack as RGB.
    VizFeatures(VizArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Write a seeded synthetic benchmark dataset.
    MakeDataset(MakeDatasetArgs),
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    pub image: PathBuf,
    /// Update this project instead of creating one.
    #[arg(long)]
    pub project: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Also compute deep features, from --features or the configured extractor.
    #[arg(long)]
    pub deep: bool,
    /// Precomputed FTS1 features (patch grid or full resolution).
    #[arg(long, requires = "deep")]
    pub features: Option<PathBuf>,
    /// Upsampler weights (WAR1) for patch-grid features.
    #[arg(long, requires = "deep")]
    pub weights: Option<PathBuf>,
    /// Deep channels to keep.
    #[arg(long, requires = "deep")]
    pub k: Option<usize>,
    /// Deep channels to report in the feature arity.
    #[arg(long, requires = "deep")]
    pub j: Option<usize>,
    /// Average extractor output over the four axis flips.
    #[arg(long, requires = "deep")]
    pub flip_sym: bool,
    /// Name recorded for precomputed features.
    #[arg(long)]
    pub extractor_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct LabelsArgs {
    pub project: String,
    /// `.png` (indexed, 0 = unlabelled) or `.json` (RLE records).
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub project: String,
    #[arg(long, default_value = "gbt")]
    pub kind: ClassifierKind,
    /// Import labels before training.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub use_deep: bool,
    #[arg(long, requires = "use_deep")]
    pub j: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    pub project: String,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write one FTS1 probability plane per class into this directory.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub spec: PathBuf,
    /// Report path; defaults to `<spec>.report.json`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VizSource {
    Deep,
    Classical,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    pub project: String,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Defaults to deep features when present.
    #[arg(long, value_enum)]
    pub source: Option<VizSource>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    Intensity,
    Texture,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    pub dir: PathBuf,
    #[arg(long, value_enum, default_value = "intensity")]
    pub phases: PhaseArg,
    #[arg(long, default_value_t = 6)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.02)]
    pub label_fraction: f64,
    /// Add an oracle deep channel with this noise level.
    #[arg(long)]
    pub oracle_noise: Option<f32>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = Config::resolve(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    if let Some(s) = &cli.store {
        config.store.root = s.clone();
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    match cli.command {
        Command::Featurize(a) => featurize(&config, a),
        Command::Labels(a) => {
            let store = ProjectStore::open(&config.store.root)?;
            let mut sp = store.load(&a.project)?;
            import_labels(&mut sp, &a.file)?;
            commit(&store, &mut sp)?;
            println!("labelled pixels: {}", project_of(&sp)?.labels().labelled_count());
            Ok(())
        }
        Command::Train(a) => train(&config, a),
        Command::Segment(a) => segment(&config, a),
        Command::Bench(a) => bench(cli.seed, a),
        Command::VizFeatures(a) => viz(&config, a),
        Command::Serve(a) => {
            if let Some(p) = a.port {
                config.server.port = p;
            }
            if let Some(h) = a.host {
                config.server.host = h;
            }
            let addr: SocketAddr = format!("{}:{}", config.server.host, config.server.port)
                .parse()
                .context("bad listen address")?;
            let store = ProjectStore::open(&config.store.root)?;
            let state = AppState::new(store, config)?;
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))
        }
        Command::MakeDataset(a) => make_dataset(cli.seed.unwrap_or(0), a),
    }
}

fn project_of(sp: &StoredProject) -> anyhow::Result<&Project> {
    sp.project.as_ref().ok_or_else(|| anyhow!("project {} has no image; run featurize first", sp.id))
}

fn project_mut(sp: &mut StoredProject) -> anyhow::Result<&mut Project> {
    let id = sp.id.clone();
    sp.project.as_mut().ok_or_else(|| anyhow!("project {id} has no image; run featurize first"))
}

fn commit(store: &ProjectStore, sp: &mut StoredProject) -> anyhow::Result<()> {
    sp.revision += 1;
    store.save(sp)
}

fn featurize(config: &Config, a: FeaturizeArgs) -> anyhow::Result<()> {
    let store = ProjectStore::open(&config.store.root)?;
    let image = load_image(&a.image)?;
    let mut sp = match &a.project {
        Some(id) => store.load(id)?,
        None => store.create(ProjectSettings {
            class_count: a.classes,
            class_names: Vec::new(),
            feature_config: config.features.clone(),
        })?,
    };
    match &mut sp.project {
        Some(p) => p.set_image(image)?,
        None => sp.project = Some(Project::new(image, sp.settings.feature_config.clone(), sp.settings.class_count)?),
    }
    let p = project_mut(&mut sp)?;
    let n = p.ensure_classical()?.channels();
    println!("project {}", sp.id);
    println!("classical channels: {n}");
    if a.deep {
        let weights_path = a.weights.clone().or_else(|| config.extractor.weights.clone());
        let weights = load_weights(weights_path.as_deref())?;
        let p = project_mut(&mut sp)?;
        let cache = match &a.features {
            Some(path) => {
                if a.flip_sym {
                    bail!("--flip-sym needs an extractor command; precomputed features are used as given");
                }
                let lr = load_feature_file(path)?;
                let stack = to_full_resolution(p.image(), lr, a.k, weights.as_ref())?;
                let id = a.extractor_id.clone().unwrap_or_else(|| format!("file:{}", path.display()));
                cache_for(p, id, false, stack)?
            }
            None => {
                if config.extractor.command.is_empty() {
                    bail!("--deep needs --features FILE or a configured extractor command");
                }
                let req = DeepRequest {
                    k: a.k,
                    flip_symmetrized: a.flip_sym,
                };
                extract_with_sidecar(p, &config.extractor, weights.as_ref(), &req)?
            }
        };
        let k = cache.key.k;
        if let Some(j) = a.j {
            if j == 0 || j > k {
                bail!("--j {j} outside 1..={k}");
            }
        }
        p.attach_deep(cache)?;
        println!("deep channels: {k}");
        println!("feature arity: {}", n + a.j.unwrap_or(k));
    }
    commit(&store, &mut sp)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RleFile {
    Bare(Vec<RleRecord>),
    Wrapped { records: Vec<RleRecord> },
}

fn import_labels(sp: &mut StoredProject, path: &Path) -> anyhow::Result<()> {
    let names = sp.settings.class_names.clone();
    let p = project_mut(sp)?;
    let (h, w) = p.dims();
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let records = match serde_json::from_slice::<RleFile>(&bytes)? {
                RleFile::Bare(r) | RleFile::Wrapped { records: r } => r,
            };
            SparseLabelMap::from_rle(h, w, p.class_count(), &records)?
        }
        _ => SparseLabelMap::from_png(&bytes, p.class_count())?,
    };
    if !names.is_empty() {
        labels.class_names = names;
    }
    p.set_labels(labels)?;
    Ok(())
}

fn train(config: &Config, a: TrainArgs) -> anyhow::Result<()> {
    let store = ProjectStore::open(&config.store.root)?;
    let mut sp = store.load(&a.project)?;
    if let Some(l) = &a.labels {
        import_labels(&mut sp, l)?;
    }
    let (_, metrics) = project_mut(&mut sp)?.train_on_labels(a.kind, &config.train, a.use_deep, a.j)?;
    commit(&store, &mut sp)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn segment(config: &Config, a: SegmentArgs) -> anyhow::Result<()> {
    let store = ProjectStore::open(&config.store.root)?;
    let mut sp = store.load(&a.project)?;
    let p = project_mut(&mut sp)?;
    let had_cache = p.classical_is_current();
    let seg = p.segment()?;
    fs::write(&a.output, seg.to_png()?).with_context(|| format!("writing {}", a.output.display()))?;
    if let Some(dir) = &a.probabilities {
        fs::create_dir_all(dir)?;
        for c in 1..=seg.class_count() {
            fs::write(dir.join(format!("class{c}.fts")), seg.probability_fts(c)?)?;
        }
    }
    if !had_cache {
        store.save(&sp)?;
    }
    let mut counts = vec![0usize; seg.class_count()];
    for &l in &seg.labels {
        counts[l as usize - 1] += 1;
    }
    println!("wrote {} ({}x{}), pixels per class {counts:?}", a.output.display(), seg.height, seg.width);
    Ok(())
}

fn bench(seed: Option<u64>, a: BenchArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let mut spec: BenchmarkSpec = toml::from_str(&text).with_context(|| format!("parsing {}", a.spec.display()))?;
    if spec.dataset.is_relative() {
        let base = a.spec.parent().unwrap_or(Path::new("."));
        spec.dataset = base.join(&spec.dataset);
    }
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    let report = run_benchmark(&spec)?;
    let out = a.output.unwrap_or_else(|| a.spec.with_extension("report.json"));
    fs::write(&out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", render_table(&report));
    println!("report: {}", out.display());
    Ok(())
}

fn viz(config: &Config, a: VizArgs) -> anyhow::Result<()> {
    let store = ProjectStore::open(&config.store.root)?;
    let mut sp = store.load(&a.project)?;
    let p = project_mut(&mut sp)?;
    let source = a.source.unwrap_or(if p.deep().is_some() { VizSource::Deep } else { VizSource::Classical });
    let rgb = match source {
        VizSource::Deep => {
            let deep = p.deep().ok_or_else(|| anyhow!("project has no deep features; run featurize --deep first"))?;
            visualize_pca_rgb(&deep.stack)?
        }
        VizSource::Classical => visualize_pca_rgb(p.ensure_classical()?)?,
    };
    fs::write(&a.output, encode_rgb_png(&rgb)?)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn make_dataset(seed: u64, a: MakeDatasetArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        n_images: a.images,
        height: a.size,
        width: a.size,
        phases: match a.phases {
            PhaseArg::Intensity => Phases::Intensity,
            PhaseArg::Texture => Phases::Texture,
        },
        label_fraction: a.label_fraction,
        oracle_noise: a.oracle_noise,
        seed,
    };
    synthetic_dataset(&spec)?.write(&a.dir)?;
    println!("wrote {} images to {}", a.images, a.dir.display());
    Ok(())
}
