//! Synthetic scenes and on-disk datasets.
//!
//! Scenes are built from "planted" objects: spherical shells of Gaussians
//! with a known index set, a display color, and a reserved axis in raw
//! embedding space. Because the planted grouping is known exactly, these
//! scenes give the grounding pipeline a ground truth that captured data
//! never has: solo renders of a planted group are the true amodal
//! silhouettes, visibility-weighted axis mixtures stand in for image
//! embeddings, and per-object modal masks play the role of segmenter
//! output. [`write_dataset`] lays all of it out in the directory format
//! the ingestion and evaluation paths consume, including the offline
//! vision-language and embedding fixtures.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::raster;
use crate::scene::{save_scene, Camera, Gaussian3D, GaussianScene, LATENT_DIM};
use crate::supervision::{compute_mask_scale, MaskTriplet};

/// One synthetic object: a shell of Gaussians around `center` with a
/// dedicated raw-embedding axis and a query phrase naming it.
#[derive(Debug, Clone)]
pub struct PlantedObject {
    pub name: String,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
    /// Raw-embedding axis reserved for this object.
    pub axis: usize,
}

/// A scene with known per-object Gaussian index sets.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub scene: GaussianScene,
    pub objects: Vec<PlantedObject>,
    /// `groups[o]` lists the scene indices belonging to `objects[o]`.
    pub groups: Vec<Vec<usize>>,
}

/// Builds a scene of shell-sampled objects: `per_object` Gaussians per
/// object, positions uniform on each sphere, near-opaque, colored like
/// their object with slight jitter, latents near zero.
pub fn planted_scene(objects: Vec<PlantedObject>, per_object: usize, seed: u64) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::with_capacity(objects.len() * per_object);
    let mut groups = Vec::with_capacity(objects.len());
    for obj in &objects {
        let start = gaussians.len();
        for _ in 0..per_object {
            let dir = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-3 {
                    break v / n;
                }
            };
            let mut g = Gaussian3D::isotropic(
                obj.center + dir * obj.radius,
                obj.radius / 6.0 * rng.gen_range(0.7..1.3),
                rng.gen_range(0.85..0.95),
                [
                    (obj.color[0] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                    (obj.color[1] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                    (obj.color[2] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                ],
            );
            g.latent = (0..LATENT_DIM).map(|_| rng.gen_range(-0.01..0.01)).collect();
            gaussians.push(g);
        }
        groups.push((start..start + per_object).collect());
    }
    let scene = GaussianScene::new(gaussians, LATENT_DIM).expect("generated Gaussians are valid");
    SynthScene { scene, objects, groups }
}

/// `n` cameras on a horizontal ring of the given radius and height above
/// `center`, all looking at `center`. Call twice with different heights
/// to cover shell tops and bottoms. The ring is phased by half a step so
/// no camera sits exactly on a coordinate axis, where side-by-side
/// objects would line up and occlude each other.
pub fn ring_cameras(
    center: Vector3<f64>,
    radius: f64,
    height: f64,
    n: usize,
    width: usize,
    height_px: usize,
    focal: f64,
) -> Vec<Camera> {
    (0..n)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
            let eye = center + Vector3::new(radius * theta.cos(), height, radius * theta.sin());
            Camera::look_at(eye, center, Vector3::new(0.0, 1.0, 0.0), width, height_px, focal, focal)
        })
        .collect()
}

/// A camera placed behind `occluder` on the line through `target`, so the
/// occluder sits between camera and target. `behind` is the eye's
/// distance past the occluder and `lateral` shifts the eye sideways:
/// zero hides the target completely (when the occluder's angular size
/// dominates), small values leave a crescent visible.
pub fn occlusion_camera(
    target: Vector3<f64>,
    occluder: Vector3<f64>,
    behind: f64,
    lateral: f64,
    width: usize,
    height: usize,
    focal: f64,
) -> Camera {
    let dir = (occluder - target).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let side = {
        let s = dir.cross(&up);
        if s.norm() > 1e-6 { s.normalize() } else { Vector3::new(1.0, 0.0, 0.0) }
    };
    let eye = occluder + dir * behind + side * lateral;
    Camera::look_at(eye, target, up, width, height, focal, focal)
}

/// One supervised synthetic view.
#[derive(Debug, Clone)]
pub struct SynthView {
    pub id: String,
    pub camera: Camera,
    /// Rendered color image, `width*height*3`.
    pub image: Vec<f64>,
    /// One triplet per object that is visible in this view.
    pub triplets: Vec<MaskTriplet>,
    /// Unit mixture of object axes weighted by visibility.
    pub image_embedding: Vec<f64>,
    /// Fraction of each object's solo silhouette that stays visible.
    pub visible_fraction: Vec<f64>,
}

fn axis_embedding(dim: usize, axis: usize) -> Vec<f64> {
    assert!(axis < dim, "axis {axis} outside embedding width {dim}");
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::Numeric("zero-norm embedding mixture".to_string()));
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

/// Renders each camera and assembles the supervision a real pipeline
/// would get from a segmenter and an image-text encoder: per-object
/// visible-part masks, world-space scales measured through the rendered
/// depth map, per-mask embeddings on the object's axis with `jitter`
/// noise, and a visibility-weighted image embedding. Objects invisible
/// in a view (or too small to carry a scale) contribute no triplet.
pub fn supervise_views(
    synth: &SynthScene,
    cameras: &[(String, Camera)],
    cfg: &RunConfig,
    jitter: f64,
    seed: u64,
) -> Result<Vec<SynthView>> {
    let dim = cfg.supervision.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(cameras.len());
    for (id, cam) in cameras {
        let full = raster::render(&synth.scene, cam, &cfg.raster, None);
        let mut triplets = Vec::new();
        let mut fractions = Vec::with_capacity(synth.objects.len());
        let mut mix = vec![0.0f64; dim];
        for (o, obj) in synth.objects.iter().enumerate() {
            let solo = raster::render(&synth.scene, cam, &cfg.raster, Some(&synth.groups[o]))
                .alpha_mask(cfg.grounding.amodal_tau);
            let modal =
                raster::modal_mask_from(&full, &synth.groups[o], synth.scene.len(), cfg.grounding.modal_rho)?;
            let frac = if solo.count() == 0 {
                0.0
            } else {
                modal.count() as f64 / solo.count() as f64
            };
            fractions.push(frac);
            for (m, v) in mix.iter_mut().zip(axis_embedding(dim, obj.axis).iter()) {
                *m += frac * v;
            }
            // The embedding is drawn even for invisible objects so the
            // random stream does not depend on visibility.
            let noisy: Vec<f64> = axis_embedding(dim, obj.axis)
                .into_iter()
                .map(|v| v + jitter * rng.gen_range(-1.0..1.0))
                .collect();
            match compute_mask_scale(&modal, &full.depth, cam) {
                Ok(scale) => triplets.push(MaskTriplet {
                    mask_index: o,
                    mask: modal,
                    confidence: 0.95,
                    embedding: normalized(noisy)?,
                    scale,
                }),
                Err(Error::Numeric(_)) => {} // invisible or single-pixel object
                Err(other) => return Err(other),
            }
        }
        views.push(SynthView {
            id: id.clone(),
            camera: cam.clone(),
            image: full.color,
            triplets,
            image_embedding: normalized(mix)
                .map_err(|_| Error::Numeric(format!("view {id} sees no objects")))?,
            visible_fraction: fractions,
        });
    }
    Ok(views)
}

/// Phrase-to-embedding table covering every object phrase (its reserved
/// axis) and every canonical phrase (axes after the objects').
pub fn embedding_table(
    objects: &[PlantedObject],
    canonical: &[String],
    dim: usize,
) -> BTreeMap<String, Vec<f64>> {
    let mut table = BTreeMap::new();
    for obj in objects {
        table.insert(obj.name.clone(), axis_embedding(dim, obj.axis));
    }
    let base = objects.iter().map(|o| o.axis).max().map_or(0, |m| m + 1);
    for (k, phrase) in canonical.iter().enumerate() {
        table.insert(phrase.clone(), axis_embedding(dim, base + k));
    }
    table
}

/// One benchmark query for [`write_dataset`].
#[derive(Debug, Clone)]
pub struct SynthQuery {
    pub id: String,
    /// The text sent to the vision-language client (may be implicit).
    pub text: String,
    /// Name of the planted object the query should resolve to.
    pub object: String,
    /// Views the benchmark evaluates this query on.
    pub views: Vec<String>,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("tree serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn base64_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    BASE64.encode(bytes)
}

/// Writes a complete scene directory:
///
/// - `Images/<view>.png`, `Transforms_train.json`, `Points3d.ply` — the
///   reconstruction inputs;
/// - `masks/<view>/index.json` + PNGs and `embeddings/<view>.f32` — the
///   segmenter/encoder outputs ingestion consumes (one entry per object,
///   in object order, so mask indices line up across views);
/// - `Mask_visible/<view>/<object>.png`, `Mask_complete/<view>/<object>.png`
///   — evaluation ground truth (visible parts and full silhouettes);
/// - `image_embeddings.json` — per-view embedding, base64 float32;
/// - `queries.json` — benchmark queries plus the top-down view id;
/// - `fixtures/lvlm.json`, `fixtures/embeddings.json` — offline
///   vision-language and text-embedding tables.
///
/// `lvlm_entries` maps implicit query texts to `(target, explanation)`;
/// queries not in the table pass through the mock client unchanged.
pub fn write_dataset(
    root: &Path,
    synth: &SynthScene,
    views: &[SynthView],
    queries: &[SynthQuery],
    top_down_view: &str,
    lvlm_entries: &[(&str, &str, &str)],
    cfg: &RunConfig,
) -> Result<()> {
    let dim = cfg.supervision.embedding_dim;
    ensure_dir(&root.join("Images"))?;
    ensure_dir(&root.join("fixtures"))?;

    save_scene(&synth.scene, &root.join("Points3d.ply"), None)?;

    // Camera file in the narrow-FOV reconstruction convention.
    let first = &views
        .first()
        .ok_or_else(|| Error::Invalid("dataset needs at least one view".to_string()))?
        .camera;
    let frames: Vec<serde_json::Value> = views
        .iter()
        .map(|v| {
            serde_json::json!({
                "file_path": format!("Images/{}", v.id),
                "transform_matrix": v.camera.to_nerf_matrix(),
            })
        })
        .collect();
    write_json(
        &root.join("Transforms_train.json"),
        &serde_json::json!({
            "w": first.width,
            "h": first.height,
            "fl_x": first.fx,
            "fl_y": first.fy,
            "cx": first.cx,
            "cy": first.cy,
            "frames": frames,
        }),
    )?;

    let mut image_embeddings = serde_json::Map::new();
    for v in views {
        io::save_color_png(
            &root.join("Images").join(format!("{}.png", v.id)),
            v.camera.width,
            v.camera.height,
            &v.image,
        )?;
        image_embeddings.insert(v.id.clone(), base64_f32(&v.image_embedding).into());

        // Segmenter-style candidates: every object in object order, the
        // embedding rows matching by position.
        let mask_dir = root.join("masks").join(&v.id);
        ensure_dir(&mask_dir)?;
        let full = raster::render(&synth.scene, &v.camera, &cfg.raster, None);
        let mut index = Vec::new();
        let emb_path = root.join("embeddings").join(format!("{}.f32", v.id));
        ensure_dir(emb_path.parent().expect("embeddings dir"))?;
        let emb_file = std::fs::File::create(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
        let mut emb_w = std::io::BufWriter::new(emb_file);
        for (o, obj) in synth.objects.iter().enumerate() {
            let modal = raster::modal_mask_from(
                &full,
                &synth.groups[o],
                synth.scene.len(),
                cfg.grounding.modal_rho,
            )?;
            let file = format!("{o:03}.png");
            modal.save_png(&mask_dir.join(&file))?;
            index.push(serde_json::json!({ "file": file, "confidence": 0.95 }));
            let row = v
                .triplets
                .iter()
                .find(|t| t.mask_index == o)
                .map(|t| t.embedding.clone())
                .unwrap_or_else(|| axis_embedding(dim, obj.axis));
            io::write_f32s(&mut emb_w, row.iter().map(|&x| x as f32))
                .map_err(|e| Error::io(&emb_path, e))?;
        }
        emb_w.flush().map_err(|e| Error::io(&emb_path, e))?;
        write_json(&mask_dir.join("index.json"), &serde_json::json!({ "masks": index }))?;

        // Ground truth: visible parts and full silhouettes per object.
        let vis_dir = root.join("Mask_visible").join(&v.id);
        let com_dir = root.join("Mask_complete").join(&v.id);
        ensure_dir(&vis_dir)?;
        ensure_dir(&com_dir)?;
        for (o, obj) in synth.objects.iter().enumerate() {
            let modal = raster::modal_mask_from(
                &full,
                &synth.groups[o],
                synth.scene.len(),
                cfg.grounding.modal_rho,
            )?;
            let solo = raster::render(&synth.scene, &v.camera, &cfg.raster, Some(&synth.groups[o]))
                .alpha_mask(cfg.grounding.amodal_tau);
            modal.save_png(&vis_dir.join(format!("{}.png", obj.name)))?;
            solo.save_png(&com_dir.join(format!("{}.png", obj.name)))?;
        }
    }
    write_json(&root.join("image_embeddings.json"), &serde_json::Value::Object(image_embeddings))?;

    let query_list: Vec<serde_json::Value> = queries
        .iter()
        .map(|q| {
            serde_json::json!({
                "id": q.id,
                "text": q.text,
                "kind": if lvlm_entries.iter().any(|(t, _, _)| *t == q.text) { "implicit" } else { "explicit" },
                "object": q.object,
                "views": q.views,
            })
        })
        .collect();
    write_json(
        &root.join("queries.json"),
        &serde_json::json!({ "top_down_view": top_down_view, "queries": query_list }),
    )?;

    let lvlm: serde_json::Map<String, serde_json::Value> = lvlm_entries
        .iter()
        .map(|(q, target, why)| {
            (q.to_string(), serde_json::json!({ "target": target, "explanation": why }))
        })
        .collect();
    write_json(&root.join("fixtures").join("lvlm.json"), &serde_json::Value::Object(lvlm))?;

    let table = embedding_table(&synth.objects, &cfg.grounding.canonical_phrases, dim);
    let emb_fixture: serde_json::Map<String, serde_json::Value> = table
        .iter()
        .map(|(phrase, vec)| (phrase.clone(), base64_f32(vec).into()))
        .collect();
    write_json(
        &root.join("fixtures").join("embeddings.json"),
        &serde_json::Value::Object(emb_fixture),
    )?;
    Ok(())
}

/// The three-object arrangement most tests use: `alpha` (red, left),
/// `beta` (green, right), `gamma` (blue, raised). `beta` can occlude
/// `alpha` from cameras placed past it on the x axis.
pub fn standard_objects() -> Vec<PlantedObject> {
    vec![
        PlantedObject {
            name: "alpha".to_string(),
            center: Vector3::new(-1.6, 0.0, 0.0),
            radius: 0.5,
            color: [0.85, 0.15, 0.1],
            axis: 0,
        },
        PlantedObject {
            name: "beta".to_string(),
            center: Vector3::new(1.6, 0.0, 0.0),
            radius: 0.5,
            color: [0.1, 0.8, 0.2],
            axis: 1,
        },
        PlantedObject {
            name: "gamma".to_string(),
            center: Vector3::new(0.0, 1.4, 0.0),
            radius: 0.5,
            color: [0.15, 0.25, 0.9],
            axis: 2,
        },
    ]
}
