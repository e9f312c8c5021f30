//! Metrics and the dataset benchmark harness.
//!
//! A scene directory holds `Images/`, `Transforms_train.json` (and
//! optionally `Transforms_test.json`) in the NeRF camera convention,
//! `Points3d.ply`, per-view/per-object ground-truth masks under
//! `Mask_visible/` and `Mask_complete/`, and a `queries.json` with the
//! benchmark queries. [`run_benchmark`] grounds every query against
//! trained artifacts and scores the predicted masks: modal IoU against
//! the visible-part annotation, amodal IoU against the full-silhouette
//! annotation, and localization accuracy (does the relevancy peak fall
//! inside the target's visible bounding box). Ground truth a dataset
//! does not provide leaves the metric absent — never zero — and
//! per-query means ignore absent entries.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ground::{
    embed_text, ground, relevancy_of_render, EmbeddingProvider, FixtureEmbedder, GroundView,
    GroundingRequest, LvlmClient,
};
use crate::mappers::MapperNet;
pub use crate::mask::iou;
use crate::mask::BinaryMask;
use crate::raster;
use crate::scene::{Camera, GaussianScene};
use crate::supervision::EmbeddingCodec;

/// Adjusted Rand index between two labelings of the same points. Noise
/// markers (negative labels) count as one ordinary class, so two runs
/// must agree on the noise set as well as the partition to score 1.
/// Degenerate cases where both labelings are a single class (or all
/// singletons) score 1 by convention.
pub fn adjusted_rand_index(a: &[i32], b: &[i32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "label vectors disagree in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let index_of = |labels: &[i32]| -> std::collections::BTreeMap<i32, usize> {
        let mut m = std::collections::BTreeMap::new();
        for &l in labels {
            let next = m.len();
            m.entry(l).or_insert(next);
        }
        m
    };
    let (ia, ib) = (index_of(a), index_of(b));
    let mut table = vec![0u64; ia.len() * ib.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x] * ib.len() + ib[y]] += 1;
    }
    let c2 = |v: u64| if v < 2 { 0.0 } else { (v * (v - 1) / 2) as f64 };
    let sum_ij: f64 = table.iter().map(|&v| c2(v)).sum();
    let sum_a: f64 = (0..ia.len())
        .map(|r| c2(table[r * ib.len()..(r + 1) * ib.len()].iter().sum()))
        .sum();
    let sum_b: f64 = (0..ib.len())
        .map(|c| c2((0..ia.len()).map(|r| table[r * ib.len() + c]).sum()))
        .sum();
    let expected = sum_a * sum_b / c2(n as u64);
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    /// Tight bounding box of a mask's set pixels; `None` when empty.
    pub fn of_mask(mask: &BinaryMask) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for (x, y) in mask.iter_set() {
            b = Some(match b {
                None => PixelBox { x0: x, y0: y, x1: x, y1: y },
                Some(r) => PixelBox {
                    x0: r.x0.min(x),
                    y0: r.y0.min(y),
                    x1: r.x1.max(x),
                    y1: r.y1.max(y),
                },
            });
        }
        b
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Whether the highest-relevancy pixel falls inside the box (inclusive).
/// Ties go to the row-major first pixel. The box must lie within the
/// `width` x `height` map (checked), and the map must be that size.
pub fn localization_accuracy(
    relevancy: &[f64],
    width: usize,
    height: usize,
    bbox: &PixelBox,
) -> bool {
    assert_eq!(relevancy.len(), width * height, "relevancy map shape");
    assert!(
        bbox.x0 <= bbox.x1 && bbox.y0 <= bbox.y1 && bbox.x1 < width && bbox.y1 < height,
        "bounding box {bbox:?} outside {width}x{height}"
    );
    let mut best = 0usize;
    for (p, &s) in relevancy.iter().enumerate() {
        if s > relevancy[best] {
            best = p;
        }
    }
    bbox.contains(best % width, best / width)
}

/// Which transforms file a view came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One posed view of a scene directory.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub id: String,
    pub camera: Camera,
    pub image_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// The text names the object directly.
    Explicit,
    /// The text describes the object; a vision-language model resolves it.
    Implicit,
}

/// One benchmark query from `queries.json`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryAnnotation {
    pub id: String,
    pub text: String,
    pub kind: QueryKind,
    /// Ground-truth object name; indexes the mask directories.
    pub object: String,
    /// Views this query is evaluated on.
    pub views: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueriesFile {
    top_down_view: String,
    queries: Vec<QueryAnnotation>,
}

/// A scene directory with validated views, queries, and ground truth
/// locations.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub name: String,
    pub views: Vec<DatasetView>,
    pub points_ply: PathBuf,
    pub queries: Vec<QueryAnnotation>,
    /// View whose image is handed to the vision-language client;
    /// present whenever `queries.json` is.
    pub top_down_view: Option<String>,
}

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: Option<f64>,
    fl_x: Option<f64>,
    fl_y: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    w: Option<usize>,
    h: Option<usize>,
    frames: Vec<FrameEntry>,
    // Foreign transforms files carry extra keys; they are ignored.
    #[serde(flatten)]
    _rest: serde_json::Map<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
    #[serde(flatten)]
    _rest: serde_json::Map<String, serde_json::Value>,
}

/// Parses one transforms file in the NeRF convention: `transform_matrix`
/// is camera-to-world with OpenGL axes (x right, y up, z backward), and
/// the focal comes from `fl_x`/`fl_y` when present, else from
/// `camera_angle_x` (horizontal field of view). Image sizes come from
/// global `w`/`h` fields or, failing that, from the image files.
fn parse_transforms(path: &Path, root: &Path, split: Split) -> Result<Vec<DatasetView>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let tf: TransformsFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(path, format!("bad transforms file: {e}")))?;
    let mut views = Vec::with_capacity(tf.frames.len());
    for frame in &tf.frames {
        let given = root.join(&frame.file_path);
        let image_path = if given.is_file() {
            given
        } else {
            // NeRF files habitually omit the extension.
            let with_ext = given.with_extension("png");
            if with_ext.is_file() {
                with_ext
            } else {
                return Err(Error::format(
                    &given,
                    "frame image not found (tried as-is and with .png)".to_string(),
                ));
            }
        };
        let id = Path::new(&frame.file_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::format(path, format!("frame path {:?} has no stem", frame.file_path)))?;
        let (w, h) = match (tf.w, tf.h) {
            (Some(w), Some(h)) => (w, h),
            _ => {
                let (w, h) = image::image_dimensions(&image_path)
                    .map_err(|e| Error::format(&image_path, format!("cannot read size: {e}")))?;
                (w as usize, h as usize)
            }
        };
        let fx = match (tf.fl_x, tf.camera_angle_x) {
            (Some(f), _) => f,
            (None, Some(angle)) => 0.5 * w as f64 / (0.5 * angle).tan(),
            (None, None) => {
                return Err(Error::format(
                    path,
                    "transforms carry neither fl_x nor camera_angle_x".to_string(),
                ))
            }
        };
        let fy = tf.fl_y.unwrap_or(fx);
        let cx = tf.cx.unwrap_or(w as f64 / 2.0);
        let cy = tf.cy.unwrap_or(h as f64 / 2.0);
        views.push(DatasetView {
            id,
            camera: Camera::from_nerf_matrix(&frame.transform_matrix, w, h, fx, fy, cx, cy),
            image_path,
            split,
        });
    }
    Ok(views)
}

impl SceneDataset {
    /// Loads and validates a scene directory: cameras from the transforms
    /// files, the point cloud path, and (when `queries.json` exists) the
    /// benchmark queries. Every query view and the top-down view must
    /// name a loaded view.
    pub fn load(root: &Path) -> Result<SceneDataset> {
        let name = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".to_string());
        let train = root.join("Transforms_train.json");
        let mut views = parse_transforms(&train, root, Split::Train)?;
        let test = root.join("Transforms_test.json");
        if test.is_file() {
            views.extend(parse_transforms(&test, root, Split::Test)?);
        }
        let mut seen = BTreeSet::new();
        for v in &views {
            if !seen.insert(v.id.clone()) {
                return Err(Error::format(&train, format!("duplicate view id {:?}", v.id)));
            }
        }

        let points_ply = root.join("Points3d.ply");
        if !points_ply.is_file() {
            return Err(Error::Invalid(format!(
                "{}: missing Points3d.ply",
                root.display()
            )));
        }

        let queries_path = root.join("queries.json");
        let (queries, top_down_view) = if queries_path.is_file() {
            let file = File::open(&queries_path).map_err(|e| Error::io(&queries_path, e))?;
            let qf: QueriesFile = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| Error::format(&queries_path, format!("bad queries file: {e}")))?;
            for q in &qf.queries {
                for view in &q.views {
                    if !seen.contains(view) {
                        return Err(Error::format(
                            &queries_path,
                            format!("query {:?} names unknown view {:?}", q.id, view),
                        ));
                    }
                }
            }
            if !seen.contains(&qf.top_down_view) {
                return Err(Error::format(
                    &queries_path,
                    format!("top_down_view {:?} is not a loaded view", qf.top_down_view),
                ));
            }
            (qf.queries, Some(qf.top_down_view))
        } else {
            (Vec::new(), None)
        };

        Ok(SceneDataset { root: root.to_path_buf(), name, views, points_ply, queries, top_down_view })
    }

    pub fn view(&self, id: &str) -> Option<&DatasetView> {
        self.views.iter().find(|v| v.id == id)
    }

    fn gt_mask(&self, dir: &str, view_id: &str, object: &str) -> Result<Option<BinaryMask>> {
        let path = self.root.join(dir).join(view_id).join(format!("{object}.png"));
        if !path.is_file() {
            return Ok(None);
        }
        BinaryMask::load_png(&path).map(Some)
    }

    /// Visible-part annotation for (view, object); `None` when the
    /// dataset does not provide it.
    pub fn visible_mask(&self, view_id: &str, object: &str) -> Result<Option<BinaryMask>> {
        self.gt_mask("Mask_visible", view_id, object)
    }

    /// Full-silhouette (occlusion-completed) annotation for (view,
    /// object); `None` when the dataset does not provide it.
    pub fn complete_mask(&self, view_id: &str, object: &str) -> Result<Option<BinaryMask>> {
        self.gt_mask("Mask_complete", view_id, object)
    }

    /// Loads a view's image as row-major RGB in [0,1].
    pub fn load_image(&self, view_id: &str) -> Result<Vec<f64>> {
        let view = self
            .view(view_id)
            .ok_or_else(|| Error::Invalid(format!("unknown view id {view_id:?}")))?;
        let img = image::open(&view.image_path)
            .map_err(|e| Error::format(&view.image_path, format!("cannot decode: {e}")))?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize) != (view.camera.width, view.camera.height)
        {
            return Err(Error::format(
                &view.image_path,
                format!(
                    "image is {}x{} but the camera says {}x{}",
                    img.width(),
                    img.height(),
                    view.camera.width,
                    view.camera.height
                ),
            ));
        }
        Ok(img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
    }

    /// Per-view image embeddings from `image_embeddings.json` (base64
    /// float32 rows, one per view id).
    pub fn image_embedding(&self, view_id: &str, dim: usize) -> Result<Vec<f64>> {
        let table = FixtureEmbedder::load(&self.root.join("image_embeddings.json"), dim)?;
        table.embed(view_id)
    }
}

/// Everything a trained checkpoint contributes to the benchmark.
pub struct BenchmarkArtifacts<'a> {
    pub scene: &'a GaussianScene,
    pub language_net: &'a MapperNet,
    pub instance_net: &'a MapperNet,
    pub codec: &'a EmbeddingCodec,
    pub ground_views: &'a [GroundView],
    pub lvlm: &'a dyn LvlmClient,
    pub embedder: &'a dyn EmbeddingProvider,
}

/// One view's metrics inside a query row. Absent ground truth leaves a
/// metric `None`.
#[derive(Debug, Clone, Serialize)]
pub struct PerViewMetrics {
    pub view: String,
    pub modal_iou: Option<f64>,
    pub amodal_iou: Option<f64>,
    pub loc_acc: Option<f64>,
}

/// One benchmark row: per-view metrics averaged over the query's views.
#[derive(Debug, Clone, Serialize)]
pub struct QueryRow {
    pub scene: String,
    pub query_id: String,
    pub query_text: String,
    pub target: String,
    pub modal_iou: Option<f64>,
    pub amodal_iou: Option<f64>,
    pub loc_acc: Option<f64>,
    /// Views where prediction and ground truth were both empty and the
    /// IoU of 1.0 came from the both-empty convention.
    pub both_empty: Vec<String>,
    pub per_view: Vec<PerViewMetrics>,
}

/// Whole-benchmark report; the JSON mirror of the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub scene: String,
    pub rows: Vec<QueryRow>,
    /// Unweighted means over the queries where the metric is present.
    pub overall_modal_iou: Option<f64>,
    pub overall_amodal_iou: Option<f64>,
    pub overall_loc_acc: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Grounds every dataset query against the artifacts and writes the
/// metric report: a CSV at `csv_path` (columns scene, query_id,
/// query_text, target, modal_iou, amodal_iou, loc_acc; one row per query
/// plus an `overall` row of unweighted means) and a JSON mirror with the
/// config hash at the same path with extension `json`. Modal IoU scores
/// against `Mask_visible`, amodal against `Mask_complete`; localization
/// accuracy asks whether the relevancy peak of the evaluated view falls
/// inside the visible annotation's bounding box.
pub fn run_benchmark(
    dataset: &SceneDataset,
    artifacts: &BenchmarkArtifacts,
    cfg: &RunConfig,
    csv_path: &Path,
) -> Result<BenchmarkReport> {
    let dim = cfg.supervision.embedding_dim;
    let mut rows = Vec::with_capacity(dataset.queries.len());
    for q in &dataset.queries {
        let top_down = dataset
            .top_down_view
            .clone()
            .expect("queries imply a top-down view");
        let request = GroundingRequest {
            query_text: q.text.clone(),
            top_down_view_id: top_down,
            target_views: q.views.clone(),
        };
        let result = ground(
            artifacts.scene,
            artifacts.language_net,
            artifacts.instance_net,
            artifacts.codec,
            artifacts.ground_views,
            artifacts.lvlm,
            artifacts.embedder,
            &request,
            cfg,
        )?;
        let query_emb = embed_text(artifacts.embedder, &result.target_phrase, dim)?;
        let canon: Vec<Vec<f64>> = cfg
            .grounding
            .canonical_phrases
            .iter()
            .map(|p| embed_text(artifacts.embedder, p, dim))
            .collect::<Result<_>>()?;

        let mut per_view = Vec::with_capacity(result.views.len());
        let mut both_empty = Vec::new();
        for vm in &result.views {
            let visible = dataset.visible_mask(&vm.view_id, &q.object)?;
            let complete = dataset.complete_mask(&vm.view_id, &q.object)?;
            let modal_iou = visible.as_ref().map(|gt| iou(&vm.modal, gt)).transpose()?;
            let amodal_iou = complete.as_ref().map(|gt| iou(&vm.amodal, gt)).transpose()?;
            if visible.as_ref().is_some_and(|gt| gt.count() == 0) && vm.modal.count() == 0 {
                both_empty.push(format!("{} modal", vm.view_id));
            }
            if complete.as_ref().is_some_and(|gt| gt.count() == 0) && vm.amodal.count() == 0 {
                both_empty.push(format!("{} amodal", vm.view_id));
            }
            let loc_acc = match visible.as_ref().and_then(PixelBox::of_mask) {
                Some(bbox) => {
                    let view = dataset
                        .view(&vm.view_id)
                        .expect("query views are validated at load");
                    let out = raster::render(artifacts.scene, &view.camera, &cfg.raster, None);
                    let rel = relevancy_of_render(
                        &out,
                        artifacts.language_net,
                        artifacts.codec,
                        result.selected_scale,
                        &query_emb,
                        &canon,
                    );
                    Some(localization_accuracy(&rel, out.width, out.height, &bbox) as u8 as f64)
                }
                None => None,
            };
            per_view.push(PerViewMetrics {
                view: vm.view_id.clone(),
                modal_iou,
                amodal_iou,
                loc_acc,
            });
        }
        rows.push(QueryRow {
            scene: dataset.name.clone(),
            query_id: q.id.clone(),
            query_text: q.text.clone(),
            target: result.target_phrase.clone(),
            modal_iou: mean_present(per_view.iter().map(|r| r.modal_iou)),
            amodal_iou: mean_present(per_view.iter().map(|r| r.amodal_iou)),
            loc_acc: mean_present(per_view.iter().map(|r| r.loc_acc)),
            both_empty,
            per_view,
        });
    }

    let report = BenchmarkReport {
        config_hash: cfg.hash(),
        scene: dataset.name.clone(),
        overall_modal_iou: mean_present(rows.iter().map(|r| r.modal_iou)),
        overall_amodal_iou: mean_present(rows.iter().map(|r| r.amodal_iou)),
        overall_loc_acc: mean_present(rows.iter().map(|r| r.loc_acc)),
        rows,
    };

    let mut w = csv::Writer::from_path(csv_path)
        .map_err(|e| Error::format(csv_path, format!("cannot write report: {e}")))?;
    let write = |w: &mut csv::Writer<File>, rec: [&str; 7]| {
        w.write_record(rec)
            .map_err(|e| Error::format(csv_path, format!("cannot write report: {e}")))
    };
    write(&mut w, ["scene", "query_id", "query_text", "target", "modal_iou", "amodal_iou", "loc_acc"])?;
    for r in &report.rows {
        write(
            &mut w,
            [
                &r.scene,
                &r.query_id,
                &r.query_text,
                &r.target,
                &csv_cell(r.modal_iou),
                &csv_cell(r.amodal_iou),
                &csv_cell(r.loc_acc),
            ],
        )?;
    }
    write(
        &mut w,
        [
            &report.scene,
            "overall",
            "",
            "",
            &csv_cell(report.overall_modal_iou),
            &csv_cell(report.overall_amodal_iou),
            &csv_cell(report.overall_loc_acc),
        ],
    )?;
    w.flush().map_err(|e| Error::io(csv_path, e))?;

    let json_path = csv_path.with_extension("json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(report)
}
