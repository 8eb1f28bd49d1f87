mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{app_with, labelled_project, send, train_and_wait, two_class_strokes, two_region_png};
use featseg_core::engine::decode_indexed_png;
use featseg_workbench::config::Config;
use serde_json::json;

const CONFIG: &str = r#"
[features]
sigmas = [0.0, 1.0, 2.0]
membrane_kernel_size = 5

[train]
seed = 9

[train.gbt]
n_rounds = 20
"#;

fn featseg(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featseg"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("FEATSEG_CONFIG")
        .env_remove("FEATSEG_STORE")
        .env_remove("FEATSEG_EXTRACTOR")
        .env_remove("FEATSEG_WEIGHTS")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn project_id(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("project "))
        .expect("featurize prints the project id")
        .to_string()
}

#[test]
fn featurize_reports_default_channel_count() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    std::fs::write(&img, two_region_png(40, 40)).unwrap();
    let out = featseg(&dir.path().join("store"), &["featurize", img.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("classical channels: 63"), "{}", stdout(&out));
    let id = project_id(&out);
    assert!(dir.path().join("store").join(&id).join("classical.fts").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = featseg(&store, &["featurize", "--no-such-flag", "x.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    let out = featseg(&store, &["train", "p0001", "--kind", "boosted"]);
    assert_eq!(out.status.code(), Some(2));

    let img = dir.path().join("img.png");
    std::fs::write(&img, two_region_png(32, 32)).unwrap();
    let cfg = dir.path().join("wb.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = featseg(&store, &["--config", cfg.to_str().unwrap(), "featurize", img.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let id = project_id(&out);
    let seg = dir.path().join("seg.png");
    let out = featseg(&store, &["segment", &id, "-o", seg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no trained classifier"), "{}", stderr(&out));
    assert!(!seg.exists());

    let out = featseg(&store, &["segment", "p9999", "-o", seg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn cli_and_http_segmentations_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (36, 44);
    let cfg_path = dir.path().join("wb.toml");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    let img = dir.path().join("img.png");
    std::fs::write(&img, two_region_png(h, w)).unwrap();
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, serde_json::to_vec(&json!({"records": two_class_strokes(h, w)})).unwrap()).unwrap();

    let store = dir.path().join("cli-store");
    let c = cfg_path.to_str().unwrap();
    let out = featseg(&store, &["--config", c, "featurize", img.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let id = project_id(&out);
    let out = featseg(&store, &["--config", c, "train", &id, "--kind", "gbt", "--labels", labels.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(metrics["class_counts"], json!([w / 4, w / 4]));
    let seg_path = dir.path().join("seg.png");
    let probs = dir.path().join("probs");
    let out = featseg(
        &store,
        &["--config", c, "segment", &id, "-o", seg_path.to_str().unwrap(), "--probabilities", probs.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let cli_png = std::fs::read(&seg_path).unwrap();
    assert!(probs.join("class1.fts").is_file() && probs.join("class2.fts").is_file());

    let mut cfg = Config::from_toml(CONFIG).unwrap();
    cfg.store.root = dir.path().join("http-store");
    let (app, _) = app_with(cfg);
    let pid = labelled_project(&app, h, w).await;
    train_and_wait(&app, &pid, json!({"kind": "gbt"})).await;
    let (_, http_png) = send(&app, "GET", &format!("/projects/{pid}/segmentation"), None, vec![]).await;
    assert_eq!(decode_indexed_png(&cli_png).unwrap(), decode_indexed_png(&http_png).unwrap());
    assert_eq!(cli_png, http_png);
}

#[test]
fn deep_features_from_file_and_visualisation() {
    use featseg_core::deep::write_fts;
    use featseg_core::Tensor;
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let cfg = dir.path().join("wb.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let img = dir.path().join("img.png");
    std::fs::write(&img, two_region_png(30, 30)).unwrap();
    let feats = dir.path().join("deep.fts");
    let t = Tensor::from_fn_hwc(30, 30, 8, |y, x, ch| ((y + 2 * x) * (ch + 1)) as f32 / 100.0);
    write_fts(&feats, &t, 1, (30, 30)).unwrap();

    let out = featseg(
        &store,
        &["--config", c, "featurize", img.to_str().unwrap(), "--deep", "--features", feats.to_str().unwrap(), "--k", "6", "--j", "4"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let s = stdout(&out);
    assert!(s.contains("classical channels: 30"), "{s}");
    assert!(s.contains("deep channels: 6"), "{s}");
    assert!(s.contains("feature arity: 34"), "{s}");
    let id = project_id(&out);

    let viz = dir.path().join("viz.png");
    let out = featseg(&store, &["--config", c, "viz-features", &id, "-o", viz.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rgb = featseg_core::engine::decode_image(&std::fs::read(&viz).unwrap()).unwrap();
    assert_eq!(rgb.dims(), &[30, 30, 3]);

    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, serde_json::to_vec(&two_class_strokes(30, 30)).unwrap()).unwrap();
    let out = featseg(
        &store,
        &["--config", c, "train", &id, "--labels", labels.to_str().unwrap(), "--use-deep", "--j", "4"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(metrics["feature_arity"], 34);

    let out = featseg(
        &store,
        &["featurize", img.to_str().unwrap(), "--deep", "--features", feats.to_str().unwrap(), "--flip-sym"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[cfg(unix)]
#[test]
fn sidecar_extractor_with_flip_symmetrisation() {
    use featseg_core::deep::write_fts;
    use featseg_core::Tensor;
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("full.fts");
    // Symmetric under both flips, so the flip average is the same stack.
    let t = Tensor::from_fn_hwc(24, 24, 3, |y, x, c| {
        let (dy, dx) = (y.min(23 - y) as f32, x.min(23 - x) as f32);
        (dy * dx + c as f32) / 50.0
    });
    write_fts(&feats, &t, 1, (24, 24)).unwrap();
    let script = dir.path().join("extract.sh");
    std::fs::write(&script, format!("#!/bin/sh\ntest -f \"$1\" || exit 3\ncp {} \"$2\"\n", feats.display())).unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

    let img = dir.path().join("img.png");
    std::fs::write(&img, two_region_png(24, 24)).unwrap();
    let store = dir.path().join("store");
    let out = Command::new(env!("CARGO_BIN_EXE_featseg"))
        .args(["--store", store.to_str().unwrap(), "featurize", img.to_str().unwrap(), "--deep", "--flip-sym"])
        .env("FEATSEG_EXTRACTOR", script.to_str().unwrap())
        .env_remove("FEATSEG_CONFIG")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("deep channels: 3"), "{}", stdout(&out));
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(store.join("p0001/project.json")).unwrap()).unwrap();
    assert_eq!(record["deep"]["key"]["flip_symmetrized"], true);
    assert_eq!(record["deep"]["key"]["extractor_id"], script.to_str().unwrap());
}

fn bundled_dataset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../datasets")
}

#[test]
fn bench_on_bundled_synthetic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = bundled_dataset().join("synthetic-bench.toml");
    let report = dir.path().join("report.json");
    let out = featseg(&dir.path().join("store"), &["bench", spec.to_str().unwrap(), "-o", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["miou_variant"], "iou");
    let runs = r["runs"].as_array().unwrap();
    assert!(!runs.is_empty());
    for run in runs {
        assert!(run["mean"].as_f64().unwrap() >= 0.95, "{run}");
    }
}

#[test]
fn make_dataset_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = featseg(&store, &["--seed", "3", "make-dataset", d.to_str().unwrap(), "--images", "2", "--size", "24"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for f in ["manifest.json", "images/img00.png", "labels/img01.png", "gt/img01.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
