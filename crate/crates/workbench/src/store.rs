//! On-disk project store.
//!
//! ```text
//! <root>/index.json            {"format_version": 1, "projects": {"<id>": {"dir": "<id>"}}}
//! <root>/<id>/project.json     record below
//! <root>/<id>/image.fts        exact float image
//! <root>/<id>/labels.png       indexed labels
//! <root>/<id>/classical.fts    classical stack cache
//! <root>/<id>/deep-<key>.fts   deep stack cache
//! <root>/<id>/model.war        classifier
//! ```
//!
//! Caches are verified against their recorded hashes on load and dropped
//! with a warning if they do not match or cannot be read.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use featseg_core::deep::formats::atomic_write;
use featseg_core::deep::{read_fts, write_fts};
use featseg_core::engine::{tensor_hash, DeepCache, DeepKey, HistoryEntry, TrainedModel};
use featseg_core::{ClassifierModel, FeatureSetConfig, FeatureStack, Project, SparseLabelMap, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct IndexEntry {
    dir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    projects: BTreeMap<String, IndexEntry>,
}

/// Per-project settings that exist before an image is uploaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectSettings {
    pub class_count: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub feature_config: FeatureSetConfig,
}

impl Default for ProjectSettings {
    fn default() -> Self {
        Self {
            class_count: 2,
            class_names: Vec::new(),
            feature_config: FeatureSetConfig::default(),
        }
    }
}

/// What the store keeps for one project.
#[derive(Clone, Debug)]
pub struct StoredProject {
    pub id: String,
    pub revision: u64,
    pub settings: ProjectSettings,
    pub project: Option<Project>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileRef {
    file: String,
    hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassicalRef {
    file: String,
    /// Hash of the inputs (image, config) it was computed from.
    key: String,
    hash: String,
    channel_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DeepRef {
    file: String,
    key: DeepKey,
    hash: String,
    variance_ordered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelRef {
    file: String,
    use_deep: bool,
    j: Option<usize>,
    feature_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProjectRecord {
    format_version: u32,
    id: String,
    revision: u64,
    settings: ProjectSettings,
    image: Option<FileRef>,
    labels: Option<String>,
    classical: Option<ClassicalRef>,
    deep: Option<DeepRef>,
    model: Option<ModelRef>,
    #[serde(default)]
    history: Vec<HistoryEntry>,
}

pub struct ProjectStore {
    root: PathBuf,
    index: Mutex<Index>,
    migrations: AtomicUsize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Upgrades a version-0 record in place.
///
/// Version 0 kept `classes`, `class_names` and `config` at the top level,
/// referenced the image by file name only and had no revision.
fn migrate_v0(dir: &Path, mut v: Value) -> anyhow::Result<Value> {
    let o = v.as_object_mut().ok_or_else(|| anyhow!("project record is not an object"))?;
    let class_count = o.remove("classes").unwrap_or(Value::from(2));
    let class_names = o.remove("class_names").unwrap_or(Value::Array(vec![]));
    let config = o.remove("config").unwrap_or(serde_json::to_value(FeatureSetConfig::default())?);
    o.insert(
        "settings".into(),
        serde_json::json!({"class_count": class_count, "class_names": class_names, "feature_config": config}),
    );
    let image = match o.remove("image") {
        Some(Value::String(file)) => {
            let t = read_fts(dir.join(&file))?.tensor;
            serde_json::json!({"file": file, "hash": tensor_hash(&t)})
        }
        _ => Value::Null,
    };
    o.insert("image".into(), image);
    for key in ["labels", "classical", "deep", "model"] {
        o.entry(key).or_insert(Value::Null);
    }
    o.insert("revision".into(), Value::from(0u64));
    o.insert("format_version".into(), Value::from(1u32));
    Ok(v)
}

impl ProjectStore {
    pub fn open(root: impl AsRef<Path>) -> anyhow::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).with_context(|| format!("creating store {}", root.display()))?;
        let index_path = root.join("index.json");
        let index = if index_path.is_file() {
            let index: Index = read_json(&index_path)?;
            if index.format_version > FORMAT_VERSION {
                bail!(
                    "store {} has format version {}, this build reads up to {FORMAT_VERSION}",
                    root.display(),
                    index.format_version
                );
            }
            index
        } else {
            let index = Index {
                format_version: FORMAT_VERSION,
                projects: BTreeMap::new(),
            };
            write_json(&index_path, &index)?;
            index
        };
        for (id, e) in &index.projects {
            if !root.join(&e.dir).join("project.json").is_file() {
                bail!("index entry {id:?} points at missing directory {:?}", e.dir);
            }
        }
        Ok(Self {
            root,
            index: Mutex::new(index),
            migrations: AtomicUsize::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of record migrations performed by this handle.
    pub fn migrations_applied(&self) -> usize {
        self.migrations.load(Ordering::Relaxed)
    }

    pub fn ids(&self) -> Vec<String> {
        self.index.lock().unwrap().projects.keys().cloned().collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.lock().unwrap().projects.contains_key(id)
    }

    fn dir(&self, id: &str) -> anyhow::Result<PathBuf> {
        let index = self.index.lock().unwrap();
        let e = index.projects.get(id).ok_or_else(|| anyhow!("unknown project {id:?}"))?;
        Ok(self.root.join(&e.dir))
    }

    /// Registers a new empty project and returns it.
    pub fn create(&self, settings: ProjectSettings) -> anyhow::Result<StoredProject> {
        let id = {
            let mut index = self.index.lock().unwrap();
            let n = (1..).find(|n| !index.projects.contains_key(&format!("p{n:04}"))).unwrap();
            let id = format!("p{n:04}");
            fs::create_dir_all(self.root.join(&id))?;
            index.projects.insert(id.clone(), IndexEntry { dir: id.clone() });
            id
        };
        let sp = StoredProject {
            id: id.clone(),
            revision: 0,
            settings,
            project: None,
        };
        self.save(&sp)?;
        write_json(&self.root.join("index.json"), &*self.index.lock().unwrap())?;
        Ok(sp)
    }

    fn read_record(&self, dir: &Path) -> anyhow::Result<ProjectRecord> {
        let path = dir.join("project.json");
        let raw: Value = read_json(&path)?;
        let version = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if version > FORMAT_VERSION {
            bail!("{} has format version {version}, this build reads up to {FORMAT_VERSION}", path.display());
        }
        let raw = if version == 0 {
            let v = migrate_v0(dir, raw)?;
            write_json(&path, &v)?;
            self.migrations.fetch_add(1, Ordering::Relaxed);
            log::info!("migrated {} from format version 0 to {FORMAT_VERSION}", path.display());
            v
        } else {
            raw
        };
        serde_json::from_value(raw).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes everything needed to restore `sp`. Large files are only
    /// rewritten when their content hash changed.
    pub fn save(&self, sp: &StoredProject) -> anyhow::Result<()> {
        let dir = self.dir(&sp.id)?;
        let prev = self.read_record(&dir).ok();
        let mut rec = ProjectRecord {
            format_version: FORMAT_VERSION,
            id: sp.id.clone(),
            revision: sp.revision,
            settings: sp.settings.clone(),
            image: None,
            labels: None,
            classical: None,
            deep: None,
            model: None,
            history: Vec::new(),
        };
        if let Some(p) = &sp.project {
            let (h, w) = p.dims();
            let image = FileRef {
                file: "image.fts".into(),
                hash: p.image_hash().to_string(),
            };
            if prev.as_ref().and_then(|r| r.image.as_ref()) != Some(&image) || !dir.join(&image.file).is_file() {
                write_fts(dir.join(&image.file), p.image(), 1, (h as u32, w as u32))?;
            }
            rec.image = Some(image);

            atomic_write(&dir.join("labels.png"), &p.labels().to_png()?)?;
            rec.labels = Some("labels.png".into());

            if let Some(stack) = p.classical_cached().filter(|_| p.classical_is_current()) {
                let r = ClassicalRef {
                    file: "classical.fts".into(),
                    key: p.classical_hash(),
                    hash: prev
                        .as_ref()
                        .and_then(|r| r.classical.as_ref())
                        .filter(|c| c.key == p.classical_hash())
                        .map(|c| c.hash.clone())
                        .unwrap_or_else(|| tensor_hash(stack.raster())),
                    channel_names: stack.names().to_vec(),
                };
                if prev.as_ref().and_then(|r| r.classical.as_ref()) != Some(&r) || !dir.join(&r.file).is_file() {
                    write_fts(dir.join(&r.file), stack.raster(), 1, (h as u32, w as u32))?;
                }
                rec.classical = Some(r);
            }

            if let Some(deep) = p.deep() {
                let r = DeepRef {
                    file: format!("deep-{}.fts", deep.key.cache_id()),
                    key: deep.key.clone(),
                    hash: deep.hash.clone(),
                    variance_ordered: deep.stack.variance_ordered,
                };
                if prev.as_ref().and_then(|r| r.deep.as_ref()) != Some(&r) || !dir.join(&r.file).is_file() {
                    write_fts(dir.join(&r.file), deep.stack.raster(), 1, (h as u32, w as u32))?;
                }
                rec.deep = Some(r);
            }

            if let Some(t) = p.trained() {
                t.model.save(dir.join("model.war"))?;
                rec.model = Some(ModelRef {
                    file: "model.war".into(),
                    use_deep: t.use_deep,
                    j: t.j,
                    feature_hash: t.feature_hash.clone(),
                });
            }
            rec.history = p.history().to_vec();
        }
        write_json(&dir.join("project.json"), &rec)?;
        self.remove_orphans(&dir, &rec)?;
        Ok(())
    }

    fn remove_orphans(&self, dir: &Path, rec: &ProjectRecord) -> anyhow::Result<()> {
        let mut keep = vec!["project.json".to_string()];
        keep.extend(rec.image.as_ref().map(|r| r.file.clone()));
        keep.extend(rec.labels.clone());
        keep.extend(rec.classical.as_ref().map(|r| r.file.clone()));
        keep.extend(rec.deep.as_ref().map(|r| r.file.clone()));
        keep.extend(rec.model.as_ref().map(|r| r.file.clone()));
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let ours = name.ends_with(".fts") || name.ends_with(".war") || name == "labels.png";
            if ours && !keep.contains(&name) {
                fs::remove_file(entry.path())?;
            }
        }
        Ok(())
    }

    pub fn load(&self, id: &str) -> anyhow::Result<StoredProject> {
        let dir = self.dir(id)?;
        let rec = self.read_record(&dir)?;
        let settings = rec.settings.clone();
        let Some(image_ref) = &rec.image else {
            return Ok(StoredProject {
                id: id.to_string(),
                revision: rec.revision,
                settings,
                project: None,
            });
        };
        let image = read_fts(dir.join(&image_ref.file))
            .with_context(|| format!("reading image of project {id}"))?
            .tensor;
        if tensor_hash(&image) != image_ref.hash {
            bail!("image of project {id} does not match its recorded hash");
        }
        let mut project = Project::new(image, settings.feature_config.clone(), settings.class_count)?;
        if let Some(file) = &rec.labels {
            let mut labels = SparseLabelMap::from_png(&fs::read(dir.join(file))?, settings.class_count)
                .with_context(|| format!("reading labels of project {id}"))?;
            if !settings.class_names.is_empty() {
                labels.class_names = settings.class_names.clone();
            }
            project.set_labels(labels)?;
        }
        if let Some(c) = &rec.classical {
            match load_stack(&dir.join(&c.file), &c.hash, Some(&c.channel_names), "classical_") {
                Ok(stack) => {
                    if !project.restore_classical(&c.key, stack) {
                        log::warn!("project {id}: classical cache was computed from other inputs, dropped");
                    }
                }
                Err(e) => log::warn!("project {id}: classical cache dropped: {e:#}"),
            }
        }
        if let Some(d) = &rec.deep {
            let attached = load_stack(&dir.join(&d.file), &d.hash, None, "deep_").and_then(|mut stack| {
                stack.variance_ordered = d.variance_ordered;
                project.attach_deep(DeepCache::new(d.key.clone(), stack)?)?;
                Ok(())
            });
            if let Err(e) = attached {
                log::warn!("project {id}: deep cache dropped: {e:#}");
            }
        }
        if let Some(m) = &rec.model {
            let restored = ClassifierModel::load(dir.join(&m.file)).map_err(anyhow::Error::from).and_then(|model| {
                project.set_trained(TrainedModel {
                    model,
                    use_deep: m.use_deep,
                    j: m.j,
                    feature_hash: m.feature_hash.clone(),
                })?;
                Ok(())
            });
            if let Err(e) = restored {
                log::warn!("project {id}: stored classifier dropped: {e:#}");
            }
        }
        project.set_history(rec.history.clone());
        Ok(StoredProject {
            id: id.to_string(),
            revision: rec.revision,
            settings,
            project: Some(project),
        })
    }
}

fn load_stack(path: &Path, hash: &str, names: Option<&[String]>, prefix: &str) -> anyhow::Result<FeatureStack> {
    let t: Tensor = read_fts(path)?.tensor;
    if tensor_hash(&t) != hash {
        bail!("{} does not match its recorded hash", path.display());
    }
    Ok(match names {
        Some(n) => FeatureStack::new(t.with_channel_names(n.to_vec())?)?,
        None => FeatureStack::with_prefix(t, prefix)?,
    })
}
