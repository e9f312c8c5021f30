//! Query grounding: from a language phrase to the Gaussians (and pixels)
//! that carry it.
//!
//! The pipeline resolves an open-ended query to a target phrase (vision-
//! language model, or a fixture in mock mode), embeds the phrase, picks
//! the training view whose image embedding matches best, reads the
//! grouping scale off that view's mask triplets, scores every pixel's
//! rendered language feature against the query, clusters per-Gaussian
//! instance features at the chosen scale, and selects the cluster whose
//! center matches the instance feature under the most relevant pixel.
//! Rendering only the selected group yields the amodal (occlusion-
//! completed) mask; comparing the group's blending weight against the
//! full render yields the modal (visible) mask.

pub mod hdbscan;

pub use hdbscan::{cluster, ClusterParams};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use base64::Engine;
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mappers::{l2_normalize, MapperNet};
use crate::mask::BinaryMask;
use crate::raster::{self, RenderOutput};
use crate::scene::{Camera, GaussianScene};
use crate::supervision::{EmbeddingCodec, MaskTriplet};

/// A grounding query plus the views it should be answered on.
#[derive(Debug, Clone)]
pub struct GroundingRequest {
    pub query_text: String,
    /// View handed to the vision-language model as scene overview.
    pub top_down_view_id: String,
    /// Views to produce modal/amodal masks for.
    pub target_views: Vec<String>,
}

/// One training view as the grounding stage sees it.
#[derive(Debug, Clone)]
pub struct GroundView {
    pub id: String,
    pub camera: Camera,
    /// Unit-norm whole-image embedding.
    pub image_embedding: Vec<f64>,
    pub triplets: Vec<MaskTriplet>,
}

/// Modal (visible) and amodal (occlusion-completed) masks for one view.
#[derive(Debug, Clone)]
pub struct ViewMasks {
    pub view_id: String,
    pub modal: BinaryMask,
    pub amodal: BinaryMask,
}

/// Flat clustering of per-Gaussian instance features.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// One label per Gaussian, -1 for noise.
    pub labels: Vec<i32>,
    /// Normalized mean feature per cluster, indexed by label.
    pub centers: Vec<Vec<f64>>,
    pub params: ClusterParams,
}

/// Everything a grounding call produces.
#[derive(Debug, Clone)]
pub struct GroundingResult {
    pub target_phrase: String,
    pub explanation: String,
    pub reference_view: String,
    pub selected_scale: f64,
    /// Indices of the selected Gaussians, ascending.
    pub group: Vec<usize>,
    /// Relevancy scores of the reference view, row-major.
    pub relevancy: Vec<f64>,
    pub relevancy_width: usize,
    pub relevancy_height: usize,
    pub views: Vec<ViewMasks>,
}

/// Resolves a free-form query to a (target phrase, explanation) pair.
pub trait LvlmClient {
    fn infer(&self, image_ref: &str, query: &str) -> Result<(String, String)>;
}

#[derive(Deserialize)]
struct LvlmEntry {
    target: Option<String>,
    #[serde(default)]
    explanation: String,
}

/// Offline stand-in for the vision-language model: a JSON table mapping
/// query text to `{"target", "explanation"}`. Queries absent from the
/// table pass through unchanged — an explicit query already names its
/// target. A table entry without a `target` field is a malformed
/// response and errors.
pub struct MockLvlm {
    entries: BTreeMap<String, LvlmEntry>,
}

impl MockLvlm {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries: BTreeMap<String, LvlmEntry> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, format!("bad query table: {e}")))?;
        Ok(MockLvlm { entries })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        MockLvlm {
            entries: pairs
                .iter()
                .map(|&(q, t)| {
                    (q.to_string(), LvlmEntry { target: Some(t.to_string()), explanation: String::new() })
                })
                .collect(),
        }
    }
}

impl LvlmClient for MockLvlm {
    fn infer(&self, _image_ref: &str, query: &str) -> Result<(String, String)> {
        match self.entries.get(query) {
            Some(entry) => match &entry.target {
                Some(t) => Ok((t.clone(), entry.explanation.clone())),
                None => Err(Error::Invalid(format!(
                    "mock response for query {query:?} lacks a target field"
                ))),
            },
            None => Ok((query.to_string(), "query names the target directly".to_string())),
        }
    }
}

/// Live client: POST `{"image_ref", "query"}`, expect
/// `{"target", "explanation"}`.
pub struct HttpLvlm {
    pub endpoint: String,
}

impl LvlmClient for HttpLvlm {
    fn infer(&self, image_ref: &str, query: &str) -> Result<(String, String)> {
        let body = serde_json::json!({ "image_ref": image_ref, "query": query });
        let text = post_json(&self.endpoint, &body)?;
        let reply: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Remote(format!("{}: unparseable reply: {e}", self.endpoint)))?;
        let target = reply
            .get("target")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Remote(format!("{}: reply lacks a target field", self.endpoint)))?;
        let explanation = reply.get("explanation").and_then(|v| v.as_str()).unwrap_or("");
        Ok((target.to_string(), explanation.to_string()))
    }
}

/// Supplies raw text embeddings by phrase.
pub trait EmbeddingProvider {
    fn embed(&self, phrase: &str) -> Result<Vec<f64>>;
}

/// Offline embeddings: a JSON table mapping phrase to base64-encoded
/// little-endian f32 values.
pub struct FixtureEmbedder {
    table: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

impl FixtureEmbedder {
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, String> = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, format!("bad embedding table: {e}")))?;
        let mut table = BTreeMap::new();
        for (phrase, b64) in raw {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(&b64)
                .map_err(|e| Error::format(path, format!("phrase {phrase:?}: bad base64: {e}")))?;
            if bytes.len() != dim * 4 {
                return Err(Error::format(
                    path,
                    format!("phrase {phrase:?}: {} bytes, expected {}", bytes.len(), dim * 4),
                ));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                .collect();
            table.insert(phrase, values);
        }
        Ok(FixtureEmbedder { table, dim })
    }

    pub fn from_table(table: BTreeMap<String, Vec<f64>>, dim: usize) -> Self {
        FixtureEmbedder { table, dim }
    }
}

impl EmbeddingProvider for FixtureEmbedder {
    fn embed(&self, phrase: &str) -> Result<Vec<f64>> {
        self.table.get(phrase).cloned().ok_or_else(|| {
            Error::Invalid(format!(
                "no embedding for phrase {phrase:?} in the fixture table ({}-wide)",
                self.dim
            ))
        })
    }
}

/// Live embeddings: POST `{"phrase"}`, expect `{"embedding": [..]}`.
pub struct HttpEmbedder {
    pub endpoint: String,
    pub dim: usize,
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, phrase: &str) -> Result<Vec<f64>> {
        let body = serde_json::json!({ "phrase": phrase });
        let text = post_json(&self.endpoint, &body)?;
        let reply: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Remote(format!("{}: unparseable reply: {e}", self.endpoint)))?;
        let arr = reply
            .get("embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Remote(format!("{}: reply lacks an embedding array", self.endpoint)))?;
        if arr.len() != self.dim {
            return Err(Error::Remote(format!(
                "{}: embedding of {} values, expected {}",
                self.endpoint,
                arr.len(),
                self.dim
            )));
        }
        arr.iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::Remote(format!("{}: non-numeric embedding entry", self.endpoint))))
            .collect()
    }
}

fn post_json(endpoint: &str, body: &serde_json::Value) -> Result<String> {
    ureq::post(endpoint)
        .set("content-type", "application/json")
        .send_string(&body.to_string())
        .map_err(|e| Error::Remote(format!("{endpoint}: {e}")))?
        .into_string()
        .map_err(|e| Error::Remote(format!("{endpoint}: reading reply: {e}")))
}

/// Embeds a phrase and normalizes it to unit length, validating width.
pub fn embed_text(provider: &dyn EmbeddingProvider, phrase: &str, dim: usize) -> Result<Vec<f64>> {
    let raw = provider.embed(phrase)?;
    if raw.len() != dim {
        return Err(Error::Invalid(format!(
            "embedding for {phrase:?} is {} wide, expected {dim}",
            raw.len()
        )));
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Numeric(format!("embedding for {phrase:?} has norm {norm}")));
    }
    Ok(raw.into_iter().map(|v| v / norm).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// The training view whose image embedding best matches the target
/// phrase (cosine); exact ties go to the lexicographically lowest id.
pub fn select_reference_view<'v>(views: &'v [GroundView], query: &[f64]) -> Result<&'v GroundView> {
    let mut best: Option<(&GroundView, f64)> = None;
    for v in views {
        let c = cosine(&v.image_embedding, query);
        let better = match best {
            None => true,
            Some((bv, bc)) => c > bc || (c == bc && v.id < bv.id),
        };
        if better {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v)
        .ok_or_else(|| Error::Invalid("no views available for grounding".to_string()))
}

/// The grouping scale: scale of the reference-view triplet whose
/// embedding best matches the target phrase; ties prefer the smaller
/// scale.
pub fn select_scale(triplets: &[MaskTriplet], query: &[f64]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None; // (cosine, scale)
    for t in triplets {
        let c = cosine(&t.embedding, query);
        let better = match best {
            None => true,
            Some((bc, bs)) => c > bc || (c == bc && t.scale < bs),
        };
        if better {
            best = Some((c, t.scale));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::Invalid("reference view has no mask triplets".to_string()))
}

/// Pairwise-softmax relevancy of one decoded language feature: the query
/// must beat every canonical phrase, so the score is the worst-case
/// two-way softmax. Strictly inside (0, 1) for finite dots and monotone
/// in the query dot.
pub fn relevancy_score(phi: &[f64], query: &[f64], canon: &[Vec<f64>]) -> f64 {
    let dq: f64 = phi.iter().zip(query).map(|(a, b)| a * b).sum();
    let eq = dq.exp();
    canon
        .iter()
        .map(|c| {
            let dc: f64 = phi.iter().zip(c).map(|(a, b)| a * b).sum();
            eq / (dc.exp() + eq)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Relevancy scores for a full decoded language-feature map
/// (`width * height * dim`, row-major).
pub fn relevancy_map(
    lang: &[f64],
    width: usize,
    height: usize,
    query: &[f64],
    canon: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let dim = query.len();
    if lang.len() != width * height * dim {
        return Err(Error::Invalid(format!(
            "language map of {} values does not match {width}x{height}x{dim}",
            lang.len()
        )));
    }
    if canon.is_empty() {
        return Err(Error::Invalid("need at least one canonical phrase".to_string()));
    }
    Ok((0..width * height)
        .map(|p| relevancy_score(&lang[p * dim..(p + 1) * dim], query, canon))
        .collect())
}

/// Instance features for every Gaussian at a fixed scale: the instance
/// head applied per Gaussian, rows unit-norm. Row-major `N x out_dim`.
pub fn hierarchize(scene: &GaussianScene, instance_net: &MapperNet, scale: f64) -> Vec<f64> {
    let out = instance_net.out_dim();
    let mut rows = vec![0.0f64; scene.len() * out];
    rows.par_chunks_mut(out)
        .zip(scene.gaussians.par_iter())
        .for_each(|(row, g)| {
            let (y, _) = l2_normalize(&instance_net.eval(&g.latent, scale));
            row.copy_from_slice(&y);
        });
    rows
}

/// Clusters instance feature rows; centers are normalized member means.
pub fn cluster_instances(features: &[f64], dim: usize, params: &ClusterParams) -> Result<ClusterResult> {
    let n = features.len() / dim.max(1);
    if n < params.min_cluster_size {
        return Err(Error::Invalid(format!(
            "{n} Gaussians cannot form clusters of at least {}",
            params.min_cluster_size
        )));
    }
    let labels = hdbscan::cluster(features, dim, params)?;
    let k = labels.iter().copied().max().unwrap_or(-1) + 1;
    let mut centers = vec![vec![0.0f64; dim]; k as usize];
    let mut counts = vec![0usize; k as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            let c = &mut centers[l as usize];
            for (acc, v) in c.iter_mut().zip(&features[i * dim..(i + 1) * dim]) {
                *acc += v;
            }
            counts[l as usize] += 1;
        }
    }
    for (c, &count) in centers.iter_mut().zip(&counts) {
        debug_assert!(count > 0, "labels are contiguous");
        let (y, _) = l2_normalize(c);
        *c = y;
    }
    Ok(ClusterResult { labels, centers, params: params.clone() })
}

/// Members of the cluster whose center best matches the reference
/// feature (cosine); exact ties go to the lower label. Errors when
/// everything is noise.
pub fn select_group(clusters: &ClusterResult, reference: &[f64]) -> Result<Vec<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (label, center) in clusters.centers.iter().enumerate() {
        let c = cosine(center, reference);
        let better = match best {
            None => true,
            Some((_, bc)) => c > bc,
        };
        if better {
            best = Some((label, c));
        }
    }
    let (label, _) = best.ok_or_else(|| Error::Numeric("no groups found".to_string()))?;
    Ok(clusters
        .labels
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l == label as i32)
        .map(|(i, _)| i)
        .collect())
}

/// Blended instance feature of one pixel: per-Gaussian normalized head
/// outputs mixed by blending weight, then re-normalized.
fn pixel_instance_feature(
    scene: &GaussianScene,
    instance_net: &MapperNet,
    scale: f64,
    contribs: &[raster::Contribution],
) -> Vec<f64> {
    let mut acc = vec![0.0f64; instance_net.out_dim()];
    for c in contribs {
        let g = &scene.gaussians[c.index as usize];
        let (y, _) = l2_normalize(&instance_net.eval(&g.latent, scale));
        for (a, v) in acc.iter_mut().zip(&y) {
            *a += c.weight * v;
        }
    }
    l2_normalize(&acc).0
}

/// Row-major argmax with first-wins (row-major) tie handling, optionally
/// restricted to pixels passing an alpha floor.
fn argmax_pixel(scores: &[f64], alpha: &[f64], alpha_min: Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (p, &s) in scores.iter().enumerate() {
        if let Some(floor) = alpha_min {
            if alpha[p] < floor {
                continue;
            }
        }
        match best {
            Some((_, bs)) if s <= bs => {}
            _ => best = Some((p, s)),
        }
    }
    best.map(|(p, _)| p)
}

/// Language relevancy of every pixel of a rendered latent map, computed
/// in row bands: each pixel's blended latent goes through the language
/// head, is decoded to raw embedding space, and scored against the query
/// and canonical embeddings.
pub fn relevancy_of_render(
    render: &RenderOutput,
    language_net: &MapperNet,
    codec: &EmbeddingCodec,
    scale: f64,
    query: &[f64],
    canon: &[Vec<f64>],
) -> Vec<f64> {
    let n = render.width * render.height;
    let mut scores = vec![0.0f64; n];
    scores
        .par_chunks_mut(render.width)
        .enumerate()
        .for_each(|(row, out)| {
            for (x, slot) in out.iter_mut().enumerate() {
                let latent = render.pixel_feature(x, row);
                let compressed = language_net.eval(latent, scale);
                let phi = codec.decode(&compressed);
                *slot = relevancy_score(&phi, query, canon);
            }
        });
    scores
}

/// Runs the whole grounding pipeline for one request. Errors carry the
/// failing stage's name.
#[allow(clippy::too_many_arguments)]
pub fn ground(
    scene: &GaussianScene,
    language_net: &MapperNet,
    instance_net: &MapperNet,
    codec: &EmbeddingCodec,
    views: &[GroundView],
    client: &dyn LvlmClient,
    provider: &dyn EmbeddingProvider,
    request: &GroundingRequest,
    cfg: &RunConfig,
) -> Result<GroundingResult> {
    let dim = cfg.supervision.embedding_dim;
    let (target_phrase, explanation) = client
        .infer(&request.top_down_view_id, &request.query_text)
        .map_err(|e| Error::stage("target", e))?;

    let query = embed_text(provider, &target_phrase, dim).map_err(|e| Error::stage("embed", e))?;
    let canon: Vec<Vec<f64>> = cfg
        .grounding
        .canonical_phrases
        .iter()
        .map(|p| embed_text(provider, p, dim))
        .collect::<Result<_>>()
        .map_err(|e| Error::stage("embed", e))?;

    let reference =
        select_reference_view(views, &query).map_err(|e| Error::stage("reference_view", e))?;
    let scale =
        select_scale(&reference.triplets, &query).map_err(|e| Error::stage("scale", e))?;

    let ref_render = raster::render(scene, &reference.camera, &cfg.raster, None);
    let relevancy = relevancy_of_render(&ref_render, language_net, codec, scale, &query, &canon);

    // Instance feature under the most relevant pixel; empty-space pixels
    // (alpha below the depth floor) fall back to the best covered pixel.
    let peak = argmax_pixel(&relevancy, &ref_render.alpha, None)
        .ok_or_else(|| Error::stage("reference_feature", Error::Numeric("empty relevancy map".into())))?;
    let peak = if ref_render.alpha[peak] >= cfg.raster.depth_alpha_min {
        peak
    } else {
        argmax_pixel(&relevancy, &ref_render.alpha, Some(cfg.raster.depth_alpha_min)).ok_or_else(
            || {
                Error::stage(
                    "reference_feature",
                    Error::Numeric("reference view renders no covered pixels".into()),
                )
            },
        )?
    };
    let reference_feature =
        pixel_instance_feature(scene, instance_net, scale, ref_render.contrib.pixel(peak));

    let features = hierarchize(scene, instance_net, scale);
    let params = ClusterParams {
        min_cluster_size: cfg.grounding.min_cluster_size,
        min_samples: cfg.grounding.min_cluster_size,
        cluster_selection_epsilon: cfg.grounding.cluster_selection_epsilon,
        allow_single_cluster: cfg.grounding.allow_single_cluster,
    };
    let clusters = cluster_instances(&features, instance_net.out_dim(), &params)
        .map_err(|e| Error::stage("cluster", e))?;
    let group = select_group(&clusters, &reference_feature).map_err(|e| Error::stage("group", e))?;

    let mut view_masks = Vec::with_capacity(request.target_views.len());
    for view_id in &request.target_views {
        let view = views
            .iter()
            .find(|v| &v.id == view_id)
            .ok_or_else(|| {
                Error::stage("views", Error::Invalid(format!("unknown view id {view_id:?}")))
            })?;
        let full = raster::render(scene, &view.camera, &cfg.raster, None);
        let modal = raster::modal_mask_from(&full, &group, scene.len(), cfg.grounding.modal_rho)
            .map_err(|e| Error::stage("views", e))?;
        let (amodal, _) =
            raster::render_group_amodal(scene, &group, &view.camera, &cfg.raster, cfg.grounding.amodal_tau)
                .map_err(|e| Error::stage("views", e))?;
        view_masks.push(ViewMasks { view_id: view_id.clone(), modal, amodal });
    }

    Ok(GroundingResult {
        target_phrase,
        explanation,
        reference_view: reference.id.clone(),
        selected_scale: scale,
        group,
        relevancy,
        relevancy_width: ref_render.width,
        relevancy_height: ref_render.height,
        views: view_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MapperConfig;
    use crate::mappers;
    use crate::scene::LATENT_DIM;
    use rand::{Rng, SeedableRng};

    fn unit(dim: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn relevancy_matches_closed_forms() {
        let dim = 512;
        let phi = unit(dim, 0);
        // Query aligned, one canonical with the same dot: symmetric 0.5.
        let r = relevancy_map(&phi, 1, 1, &unit(dim, 0), &[unit(dim, 0)]).unwrap();
        assert!((r[0] - 0.5).abs() < 5e-5, "{}", r[0]);
        // Query dot 1, canonical dot 0: e/(1+e).
        let r = relevancy_map(&phi, 1, 1, &unit(dim, 0), &[unit(dim, 1)]).unwrap();
        assert!((r[0] - 0.7311).abs() < 5e-5, "{}", r[0]);
        // Canonical dots {0, 0.5}: the worse ratio wins, e/(e^0.5 + e).
        let mut half = vec![0.0; dim];
        half[0] = 0.5;
        half[1] = 0.75f64.sqrt();
        let r = relevancy_map(&phi, 1, 1, &unit(dim, 0), &[unit(dim, 1), half]).unwrap();
        assert!((r[0] - 0.6225).abs() < 5e-5, "{}", r[0]);
    }

    #[test]
    fn relevancy_is_bounded_and_monotone_in_the_query_dot() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dim = 8;
        for _ in 0..100 {
            let phi: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let canon: Vec<Vec<f64>> =
                (0..3).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let q1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r1 = relevancy_score(&phi, &q1, &canon);
            assert!(r1 > 0.0 && r1 < 1.0, "{r1}");
            // Raising the query dot (shift along phi) can only help.
            let q2: Vec<f64> = q1
                .iter()
                .zip(&phi)
                .map(|(q, p)| q + 0.3 * p * phi.iter().map(|v| v * v).sum::<f64>().recip())
                .collect();
            let r2 = relevancy_score(&phi, &q2, &canon);
            assert!(r2 >= r1, "{r2} < {r1}");
        }
    }

    fn view(id: &str, emb: Vec<f64>) -> GroundView {
        GroundView {
            id: id.to_string(),
            camera: Camera::look_at(
                nalgebra::Vector3::new(0.0, 0.0, -5.0),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
                8,
                8,
                10.0,
                10.0,
            ),
            image_embedding: emb,
            triplets: vec![],
        }
    }

    #[test]
    fn reference_view_takes_best_cosine_and_ties_go_low() {
        let views = vec![
            view("b", unit(4, 1)),
            view("a", unit(4, 1)),
            view("c", unit(4, 0)),
        ];
        let q = unit(4, 0);
        assert_eq!(select_reference_view(&views, &q).unwrap().id, "c");
        // Remove the winner: "a" and "b" tie at cosine 0, lower id wins.
        assert_eq!(select_reference_view(&views[..2], &q).unwrap().id, "a");
        // Positive rescaling of the query changes nothing.
        let q2: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        assert_eq!(select_reference_view(&views, &q2).unwrap().id, "c");
        assert!(select_reference_view(&[], &q).is_err());
    }

    fn triplet(emb: Vec<f64>, scale: f64) -> MaskTriplet {
        MaskTriplet {
            mask_index: 0,
            mask: BinaryMask::new(2, 2),
            confidence: 1.0,
            embedding: emb,
            scale,
        }
    }

    #[test]
    fn scale_selection_takes_best_cosine_and_ties_go_small() {
        let trips = vec![
            triplet(unit(4, 1), 2.0),
            triplet(unit(4, 0), 0.8),
            triplet(unit(4, 0), 0.4),
        ];
        let s = select_scale(&trips, &unit(4, 0)).unwrap();
        assert_eq!(s, 0.4, "equal cosines must prefer the smaller scale");
        assert!(select_scale(&[], &unit(4, 0)).is_err());
    }

    #[test]
    fn hierarchize_rows_are_unit_norm_and_latent_determined() {
        let cfg = MapperConfig::default();
        let net = mappers::instance_mapper(&cfg);
        let gaussians = (0..4)
            .map(|i| {
                let mut g = crate::scene::Gaussian3D::isotropic(
                    nalgebra::Vector3::new(i as f64, 0.0, 0.0),
                    0.1,
                    0.5,
                    [0.5; 3],
                );
                g.latent = (0..LATENT_DIM).map(|j| ((i % 2) * (j + 1)) as f64 * 0.01).collect();
                g
            })
            .collect();
        let scene = GaussianScene::new(gaussians, LATENT_DIM).unwrap();
        let rows = hierarchize(&scene, &net, 0.7);
        let dim = net.out_dim();
        for r in 0..4 {
            let norm: f64 = rows[r * dim..(r + 1) * dim].iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // Gaussians 0 and 2 share a latent, so they share a feature row.
        assert_eq!(rows[0..dim], rows[2 * dim..3 * dim]);
        assert_ne!(rows[0..dim], rows[dim..2 * dim]);
    }

    #[test]
    fn group_selection_prefers_matching_center_and_low_label_ties() {
        let clusters = ClusterResult {
            labels: vec![0, 1, 1, 0, -1],
            centers: vec![unit(3, 0), unit(3, 1)],
            params: ClusterParams {
                min_cluster_size: 2,
                min_samples: 2,
                cluster_selection_epsilon: 0.0,
                allow_single_cluster: false,
            },
        };
        assert_eq!(select_group(&clusters, &unit(3, 1)).unwrap(), vec![1, 2]);
        // Equidistant reference: lower label wins.
        let mid = vec![0.5f64.sqrt(), 0.5f64.sqrt(), 0.0];
        assert_eq!(select_group(&clusters, &mid).unwrap(), vec![0, 3]);
        let noise = ClusterResult {
            labels: vec![-1, -1],
            centers: vec![],
            params: clusters.params.clone(),
        };
        assert!(matches!(select_group(&noise, &unit(3, 0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn mock_lvlm_passes_unknown_queries_through() {
        let mock = MockLvlm::from_pairs(&[("what holds coffee", "mug")]);
        let (t, _) = mock.infer("v0", "what holds coffee").unwrap();
        assert_eq!(t, "mug");
        let (t, e) = mock.infer("v0", "apple").unwrap();
        assert_eq!(t, "apple");
        assert!(!e.is_empty());
    }

    #[test]
    fn mock_lvlm_entry_without_target_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.json");
        std::fs::write(&path, r#"{"broken": {"explanation": "no target here"}}"#).unwrap();
        let mock = MockLvlm::load(&path).unwrap();
        assert!(mock.infer("v0", "broken").is_err());
        assert!(mock.infer("v0", "fine").is_ok());
    }

    #[test]
    fn fixture_embedder_decodes_base64_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.json");
        let values = [0.5f32, -1.0, 0.25, 2.0];
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
        std::fs::write(&path, format!(r#"{{"mug": "{b64}"}}"#)).unwrap();
        let emb = FixtureEmbedder::load(&path, 4).unwrap();
        let v = embed_text(&emb, "mug", 4).unwrap();
        let norm: f64 = v.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(embed_text(&emb, "bowl", 4).is_err());
        // Wrong width at load time is a format error.
        assert!(FixtureEmbedder::load(&path, 5).is_err());
    }

    #[test]
    fn zero_norm_embedding_is_a_numeric_error() {
        let table = BTreeMap::from([("void".to_string(), vec![0.0; 4])]);
        let emb = FixtureEmbedder::from_table(table, 4);
        assert!(matches!(embed_text(&emb, "void", 4), Err(Error::Numeric(_))));
    }

    #[test]
    fn argmax_prefers_row_major_first_on_ties() {
        let scores = vec![0.2, 0.9, 0.9, 0.1];
        let alpha = vec![1.0; 4];
        assert_eq!(argmax_pixel(&scores, &alpha, None), Some(1));
        // The alpha floor can move the winner.
        let alpha = vec![1.0, 0.0, 1.0, 1.0];
        assert_eq!(argmax_pixel(&scores, &alpha, Some(0.5)), Some(2));
    }
}
