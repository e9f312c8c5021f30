//! End-to-end runs of the compiled binary against synthetic datasets:
//! checkpoint layout and idempotency, training determinism and the
//! frozen-geometry contract, grounding outputs, offline mode, benchmark
//! reports, and the exit-code classes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use sha2::{Digest, Sha256};
use splatground::config::RunConfig;
use splatground::scene::Camera;
use splatground::synth::{
    occlusion_camera, planted_scene, ring_cameras, standard_objects, supervise_views,
    write_dataset, SynthQuery, SynthScene, SynthView,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatground"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str], expect_code: i32) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(expect_code),
        "command {:?}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Digest of every file under a directory (paths and bytes), so two
/// checkpoint directories compare in one string.
fn dir_digest(dir: &Path) -> String {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries {
            if e.is_dir() {
                walk(&e, files);
            } else {
                files.push(e);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    let mut h = Sha256::new();
    for f in &files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(f).unwrap());
    }
    format!("{:x}", h.finalize())
}

/// The small planted fixture every test here shares: three shell objects,
/// a camera ring covering top and bottom, and one view where `beta` hides
/// about half of `alpha`.
fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 21;
    cfg.supervision.embedding_dim = 16;
    cfg.supervision.codec_dim = 8;
    cfg.mappers.language_out = 8;
    cfg.training.stage2_iterations = 650;
    cfg.training.masks_per_step = 3;
    cfg.training.pixels_per_mask = 12;
    cfg.training.ray_pairs_per_step = 64;
    cfg.grounding.min_cluster_size = 10;
    cfg.validate().unwrap();
    cfg
}

fn build_dataset(root: &Path, cfg: &RunConfig) -> (SynthScene, Vec<SynthView>) {
    let synth = planted_scene(standard_objects(), 100, 33);
    let look = Vector3::new(0.0, 0.5, 0.0);
    let mut cams: Vec<(String, Camera)> = ring_cameras(look, 7.0, 1.0, 4, 48, 48, 40.0)
        .into_iter()
        .chain(ring_cameras(look, 6.0, 4.5, 2, 48, 48, 40.0))
        .chain(ring_cameras(look, 6.0, -4.5, 2, 48, 48, 40.0))
        .enumerate()
        .map(|(i, c)| (format!("v{i}"), c))
        .collect();
    cams.push((
        "occ".to_string(),
        occlusion_camera(synth.objects[0].center, synth.objects[1].center, 2.2, 1.0, 48, 48, 40.0),
    ));
    let views = supervise_views(&synth, &cams, cfg, 0.02, 3).unwrap();
    let queries = vec![
        SynthQuery {
            id: "q-explicit".to_string(),
            text: "alpha".to_string(),
            object: "alpha".to_string(),
            views: vec!["v1".to_string(), "occ".to_string()],
        },
        SynthQuery {
            id: "q-implicit".to_string(),
            text: "the green one".to_string(),
            object: "beta".to_string(),
            views: vec!["v2".to_string()],
        },
    ];
    write_dataset(
        root,
        &synth,
        &views,
        &queries,
        "v0",
        &[("the green one", "beta", "beta is the only green object")],
        cfg,
    )
    .unwrap();
    (synth, views)
}

/// Writes the fixture dataset plus a config file pointing at it; returns
/// (config path, expected config for hashes/overrides, synth views).
fn setup(dir: &Path) -> (PathBuf, RunConfig, SynthScene, Vec<SynthView>) {
    let mut cfg = fixture_config();
    let dataset = dir.join("dataset");
    std::fs::create_dir_all(&dataset).unwrap();
    let (synth, views) = build_dataset(&dataset, &cfg);
    cfg.dataset = Some(dataset);
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).unwrap();
    (config_path, cfg, synth, views)
}

#[test]
fn ingest_builds_an_idempotent_checkpoint_with_one_triplet_per_kept_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _cfg, _synth, views) = setup(dir.path());
    let config = config.to_str().unwrap().to_string();
    let out = dir.path().join("ck");
    let out_s = out.to_str().unwrap().to_string();

    run_ok(&["--config", &config, "--out", &out_s, "ingest"]);
    for file in ["scene.ply", "scene.latents", "codec.bin", "triplets.json", "config.toml"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    // One triplet per mask that survived ingestion = per visible object,
    // exactly what the dataset generator produced.
    let expected: usize = views.iter().map(|v| v.triplets.len()).sum();
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("triplets.json")).unwrap()).unwrap();
    let got: usize = index.as_object().unwrap().values().map(|v| v.as_array().unwrap().len()).sum();
    assert_eq!(got, expected);

    // Re-running on unchanged inputs rewrites every byte identically.
    let first = dir_digest(&out);
    run_ok(&["--config", &config, "--out", &out_s, "ingest"]);
    assert_eq!(dir_digest(&out), first);
}

#[test]
fn ingest_without_the_embeddings_dir_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg, _synth, _views) = setup(dir.path());
    std::fs::remove_dir_all(cfg.dataset.as_ref().unwrap().join("embeddings")).unwrap();
    let stderr = run_err(
        &[
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join("ck").to_str().unwrap(),
            "ingest",
        ],
        2,
    );
    assert!(stderr.contains("embeddings"), "{stderr}");
}

#[test]
fn feature_training_is_deterministic_and_never_rewrites_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let (_config, mut cfg, _synth, _views) = setup(dir.path());
    cfg.training.stage2_iterations = 80;
    let config_path = dir.path().join("det.toml");
    std::fs::write(&config_path, cfg.to_toml()).unwrap();
    let config = config_path.to_str().unwrap().to_string();

    // Two independent checkpoints, trained with a short schedule.
    let mut digests = Vec::new();
    for name in ["ck1", "ck2"] {
        let out = dir.path().join(name);
        let out_s = out.to_str().unwrap().to_string();
        run_ok(&["--config", &config, "--out", &out_s, "ingest"]);
        let ply_before = std::fs::read(out.join("scene.ply")).unwrap();
        let latents_before = std::fs::read(out.join("scene.latents")).unwrap();
        run_ok(&[
            "--config", &config, "--out", &out_s, "--seed", "5", "train", "--stage", "features",
        ]);
        assert_eq!(
            std::fs::read(out.join("scene.ply")).unwrap(),
            ply_before,
            "stage 2 must not touch geometry"
        );
        assert_ne!(
            std::fs::read(out.join("scene.latents")).unwrap(),
            latents_before,
            "stage 2 should move latents"
        );
        assert!(out.join("language_mapper.bin").is_file());
        assert!(out.join("instance_mapper.bin").is_file());
        digests.push((
            std::fs::read_to_string(out.join("loss_curve.csv")).unwrap(),
            std::fs::read(out.join("scene.latents")).unwrap(),
        ));
    }
    assert_eq!(digests[0].0, digests[1].0, "fixed seed must give one loss curve");
    assert_eq!(digests[0].1, digests[1].1, "fixed seed must give identical latents");
    let curve = &digests[0].0;
    assert!(curve.starts_with("stage,step,"), "{curve}");
    assert_eq!(curve.lines().count(), 1 + 80, "one row per step plus header");
}

#[test]
fn geometry_training_consumes_dataset_images_and_moves_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (_config, mut cfg, _synth, _views) = setup(dir.path());
    cfg.training.stage1_iterations = 5;
    cfg.training.stage2_iterations = 5;
    let config_path = dir.path().join("geom.toml");
    std::fs::write(&config_path, cfg.to_toml()).unwrap();
    let config = config_path.to_str().unwrap().to_string();
    let out = dir.path().join("ck");
    let out_s = out.to_str().unwrap().to_string();

    run_ok(&["--config", &config, "--out", &out_s, "ingest"]);
    let ply_before = std::fs::read(out.join("scene.ply")).unwrap();
    run_ok(&["--config", &config, "--out", &out_s, "train", "--stage", "both"]);
    assert_ne!(
        std::fs::read(out.join("scene.ply")).unwrap(),
        ply_before,
        "the geometry stage should move the scene"
    );
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    let geometry_rows = curve.lines().filter(|l| l.starts_with("geometry,")).count();
    let feature_rows = curve.lines().filter(|l| l.starts_with("features,")).count();
    assert_eq!((geometry_rows, feature_rows), (5, 5), "{curve}");
}

#[test]
fn zero_iteration_training_returns_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (_config, mut cfg, _synth, _views) = setup(dir.path());
    cfg.training.stage2_iterations = 0;
    let config = dir.path().join("zero.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let config = config.to_str().unwrap().to_string();
    let out = dir.path().join("ck");
    let out_s = out.to_str().unwrap().to_string();

    run_ok(&["--config", &config, "--out", &out_s, "ingest"]);
    let latents_before = std::fs::read(out.join("scene.latents")).unwrap();
    run_ok(&["--config", &config, "--out", &out_s, "train", "--stage", "features"]);
    assert_eq!(
        std::fs::read(out.join("scene.latents")).unwrap(),
        latents_before,
        "zero iterations must not move latents"
    );
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1, "header only: {curve}");
    // The mapper files exist and load as freshly initialized nets.
    assert!(out.join("language_mapper.bin").is_file());
    assert!(out.join("instance_mapper.bin").is_file());
}

#[test]
fn grounding_and_eval_work_offline_and_report_the_planted_objects() {
    let dir = tempfile::tempdir().unwrap();
    let (_config, mut cfg, _synth, _views) = setup(dir.path());
    // Endpoints that would fail instantly if anything dialed them; --mock
    // must keep the run offline.
    cfg.grounding.lvlm_endpoint = Some("http://127.0.0.1:9/lvlm".to_string());
    cfg.grounding.embedding_endpoint = Some("http://127.0.0.1:9/embed".to_string());
    let config_path = dir.path().join("net.toml");
    std::fs::write(&config_path, cfg.to_toml()).unwrap();
    let config = config_path.to_str().unwrap().to_string();
    let out = dir.path().join("ck");
    let out_s = out.to_str().unwrap().to_string();

    run_ok(&["--config", &config, "--out", &out_s, "ingest"]);
    run_ok(&["--config", &config, "--out", &out_s, "train", "--stage", "features"]);

    // Ground the explicit query on a clear view and the half-occluded one.
    let ground_out = run_ok(&[
        "--config", &config, "--out", &out_s, "--mock", "ground", "alpha", "--views", "v1,occ",
    ]);
    let stdout = String::from_utf8_lossy(&ground_out.stdout);
    assert!(stdout.contains("\"alpha\""), "{stdout}");
    let gdir = out.join("ground");
    for file in ["v1_modal.png", "v1_amodal.png", "occ_modal.png", "occ_amodal.png", "relevancy.png"]
    {
        assert!(gdir.join(file).is_file(), "missing {file}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gdir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["target_phrase"], serde_json::json!("alpha"));
    assert!(report["group_size"].as_u64().unwrap() > 0);
    assert!(report["config_hash"].is_string());

    // Unknown target views fail as a data error tagged with the stage.
    let stderr = run_err(
        &["--config", &config, "--out", &out_s, "--mock", "ground", "alpha", "--views", "nope"],
        2,
    );
    assert!(stderr.contains("views") && stderr.contains("nope"), "{stderr}");

    // The benchmark scores the dataset's own annotations near-perfectly
    // (the only looseness is float rounding through the checkpoint files).
    run_ok(&["--config", &config, "--out", &out_s, "--mock", "eval"]);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let overall = csv.lines().last().unwrap();
    let cells: Vec<&str> = overall.split(',').collect();
    assert_eq!(cells[1], "overall", "{csv}");
    for metric in &cells[4..7] {
        let v: f64 = metric.parse().unwrap();
        assert!(v >= 0.95, "weak overall metric {metric} in {csv}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // The hash covers the effective config: file plus --out override.
    let mut effective = cfg.clone();
    effective.out_dir = out.clone();
    assert_eq!(report["config_hash"], serde_json::json!(effective.hash()));
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_checkpoints_and_bad_flags_use_the_exit_code_classes() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _cfg, _synth, _views) = setup(dir.path());
    let config = config.to_str().unwrap().to_string();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();

    // Eval before ingest/train: a data error naming the missing file.
    let stderr =
        run_err(&["--config", &config, "--out", empty.to_str().unwrap(), "eval"], 2);
    assert!(stderr.contains("scene.ply"), "{stderr}");

    // Unknown flags are usage errors.
    run_err(&["--definitely-not-a-flag"], 1);

    // A config that fails validation is a usage error too.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[training]\nlr_latent = 0.0\n").unwrap();
    let stderr = run_err(&["--config", bad.to_str().unwrap(), "ingest"], 1);
    assert!(stderr.contains("lr_latent"), "{stderr}");
}
