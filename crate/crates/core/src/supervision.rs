//! 2D supervision: mask candidates, their physical scales, compressed
//! embedding targets, and the per-view triplets feature training consumes.
//!
//! A segmenter proposes overlapping masks per view with confidences; an
//! image-text encoder supplies one embedding per mask. This module
//! filters low-confidence and near-duplicate masks, estimates each mask's
//! world-space extent by deprojecting its pixels through the rendered
//! depth map, fits a PCA codec that compresses embeddings to the
//! language-head target width, and bundles everything into
//! (mask, embedding, scale) triplets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Vector2};
use serde::Deserialize;

use crate::config::SupervisionConfig;
use crate::error::{Error, Result};
use crate::io::{self, MAGIC_CODEC};
use crate::mask::{iou, BinaryMask};
use crate::scene::Camera;

/// One proposed segmentation mask with the segmenter's confidence.
#[derive(Debug, Clone)]
pub struct MaskCandidate {
    pub mask: BinaryMask,
    pub confidence: f64,
}

/// A surviving mask bundled with its supervision signals.
#[derive(Debug, Clone)]
pub struct MaskTriplet {
    /// Index into the view's original candidate list.
    pub mask_index: usize,
    pub mask: BinaryMask,
    pub confidence: f64,
    /// Unit-norm raw embedding (`embedding_dim` wide).
    pub embedding: Vec<f64>,
    /// World-space extent of the masked surface.
    pub scale: f64,
}

/// A mask that was filtered out during assembly, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedMask {
    pub mask_index: usize,
    pub reason: String,
}

/// Triplets for one view plus records of what was dropped and why.
#[derive(Debug, Clone)]
pub struct ViewSupervision {
    pub view_id: String,
    pub triplets: Vec<MaskTriplet>,
    pub dropped: Vec<DroppedMask>,
}

/// Drops candidates below the confidence floor, then suppresses
/// near-duplicates: among masks with pairwise IoU above `iou_max`, the
/// higher-confidence one survives (ties favor the lower original index).
/// Returns surviving original indices in ascending order; the result is
/// independent of input order up to that tie rule.
pub fn filter_and_dedupe(
    candidates: &[MaskCandidate],
    confidence_min: f64,
    iou_max: f64,
) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].confidence >= confidence_min)
        .collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .partial_cmp(&candidates[a].confidence)
            .expect("finite confidences")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for i in order {
        for &k in &kept {
            if iou(&candidates[i].mask, &candidates[k].mask)? > iou_max {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept.sort_unstable();
    Ok(kept)
}

/// World-space scale of a mask: deproject every masked pixel with finite
/// depth through the camera, take per-axis population standard deviations
/// (sx, sy, sz) of the resulting points, and return their Euclidean norm.
/// Needs at least two usable pixels.
pub fn compute_mask_scale(
    mask: &BinaryMask,
    depth: &[f64],
    cam: &Camera,
) -> Result<f64> {
    if mask.width != cam.width || mask.height != cam.height || depth.len() != mask.data.len() {
        return Err(Error::Invalid(format!(
            "mask {}x{} / depth {} / camera {}x{} shapes disagree",
            mask.width,
            mask.height,
            depth.len(),
            cam.width,
            cam.height
        )));
    }
    let mut points: Vec<[f64; 3]> = Vec::new();
    for (x, y) in mask.iter_set() {
        let d = depth[y * mask.width + x];
        if d.is_finite() {
            let p = cam.deproject_pixel(Vector2::new(x as f64 + 0.5, y as f64 + 0.5), d);
            points.push([p.x, p.y, p.z]);
        }
    }
    if points.len() < 2 {
        return Err(Error::Numeric(format!(
            "mask has {} usable pixels; scale needs at least 2",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mut mean = [0.0f64; 3];
    for p in &points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0f64; 3];
    for p in &points {
        for k in 0..3 {
            let d = p[k] - mean[k];
            var[k] += d * d;
        }
    }
    Ok((var.iter().sum::<f64>() / n).sqrt())
}

/// Linear embedding compressor: orthonormal-row projection around the
/// training mean (PCA). `encode` maps a raw embedding to `out_dim`
/// coefficients; `decode` lifts coefficients back into raw space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCodec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Training-set mean, `in_dim` long.
    pub mean: Vec<f64>,
    /// `out_dim` x `in_dim`, row-major; rows are orthonormal.
    pub basis: Vec<f64>,
}

/// Fits the codec on raw embeddings (rows of `samples`): top `out_dim`
/// eigenvectors of the sample covariance, eigenvalues descending, each
/// row's sign fixed so its largest-magnitude entry is positive. Requires
/// at least `out_dim` samples.
pub fn fit_codec(samples: &[Vec<f64>], out_dim: usize) -> Result<EmbeddingCodec> {
    let n = samples.len();
    if n < out_dim {
        return Err(Error::Invalid(format!(
            "codec fit needs at least {out_dim} samples, got {n}"
        )));
    }
    let in_dim = samples[0].len();
    if out_dim > in_dim {
        return Err(Error::Invalid(format!(
            "codec out_dim {out_dim} exceeds embedding width {in_dim}"
        )));
    }
    if let Some(bad) = samples.iter().position(|s| s.len() != in_dim) {
        return Err(Error::Invalid(format!(
            "sample {bad} has width {} but sample 0 has {in_dim}",
            samples[bad].len()
        )));
    }

    let mut mean = vec![0.0f64; in_dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, in_dim, |r, c| samples[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = cov.symmetric_eigen();

    let mut by_value: Vec<usize> = (0..in_dim).collect();
    by_value.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let mut basis = vec![0.0f64; out_dim * in_dim];
    for (row, &col) in by_value.iter().take(out_dim).enumerate() {
        let v = eig.eigenvectors.column(col);
        // Canonical sign: largest-magnitude component positive.
        let lead = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for c in 0..in_dim {
            basis[row * in_dim + c] = sign * v[c];
        }
    }
    Ok(EmbeddingCodec { in_dim, out_dim, mean, basis })
}

impl EmbeddingCodec {
    pub fn encode(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.in_dim, "encode input width");
        let mut out = vec![0.0f64; self.out_dim];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.basis[r * self.in_dim..(r + 1) * self.in_dim];
            *o = row
                .iter()
                .zip(v.iter().zip(&self.mean))
                .map(|(b, (x, m))| b * (x - m))
                .sum();
        }
        out
    }

    pub fn decode(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.out_dim, "decode input width");
        let mut out = self.mean.clone();
        for (r, coef) in u.iter().enumerate() {
            let row = &self.basis[r * self.in_dim..(r + 1) * self.in_dim];
            for (o, b) in out.iter_mut().zip(row) {
                *o += coef * b;
            }
        }
        out
    }

    /// Largest row-orthonormality defect `max |B B^T - I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.out_dim {
            for s in r..self.out_dim {
                let a = &self.basis[r * self.in_dim..(r + 1) * self.in_dim];
                let b = &self.basis[s * self.in_dim..(s + 1) * self.in_dim];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if r == s { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        io::write_header(&mut w, MAGIC_CODEC, self.in_dim as u32, self.out_dim as u32)
            .and_then(|_| {
                io::write_f32s(&mut w, self.mean.iter().chain(&self.basis).map(|&v| v as f32))
            })
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (in_dim, out_dim, payload) = load_codec_raw(path)?;
        let mean = payload[..in_dim].to_vec();
        let basis = payload[in_dim..].to_vec();
        Ok(EmbeddingCodec { in_dim, out_dim, mean, basis })
    }
}

fn load_codec_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    // The payload is mean (in_dim) + basis (out_dim * in_dim); the generic
    // container checks count*dim, so read it with matching shape math.
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (in_dim, out_dim) = io::read_header(&mut r, MAGIC_CODEC)
        .map_err(|e| Error::io(path, e))?
        .map_err(|m| Error::format(path, m))?;
    let (in_dim, out_dim) = (in_dim as usize, out_dim as usize);
    if out_dim > in_dim || in_dim == 0 {
        return Err(Error::format(path, format!("bad codec dims {in_dim}x{out_dim}")));
    }
    let n = in_dim + out_dim * in_dim;
    let values = io::read_f32s(&mut r, n)
        .map_err(|e| Error::format(path, format!("codec payload truncated: {e}")))?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after codec payload".to_string()));
    }
    Ok((in_dim, out_dim, values.into_iter().map(f64::from).collect()))
}

/// Builds the per-view triplet list: filters/dedupes candidates, computes
/// each survivor's scale through the depth map, and normalizes its
/// embedding. Masks whose scale is undefined (fewer than two pixels with
/// finite depth) become [`DroppedMask`] records instead of errors.
pub fn assemble_view_triplets(
    view_id: &str,
    candidates: &[MaskCandidate],
    embeddings: &[Vec<f64>],
    depth: &[f64],
    cam: &Camera,
    cfg: &SupervisionConfig,
) -> Result<ViewSupervision> {
    if candidates.len() != embeddings.len() {
        return Err(Error::Invalid(format!(
            "view {view_id}: {} masks but {} embeddings",
            candidates.len(),
            embeddings.len()
        )));
    }
    let survivors = filter_and_dedupe(candidates, cfg.confidence_min, cfg.iou_max)?;
    let mut triplets = Vec::new();
    let mut dropped = Vec::new();
    for i in survivors {
        let emb = &embeddings[i];
        if emb.len() != cfg.embedding_dim {
            return Err(Error::Invalid(format!(
                "view {view_id} mask {i}: embedding width {} != {}",
                emb.len(),
                cfg.embedding_dim
            )));
        }
        let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "view {view_id} mask {i}: zero-norm embedding"
            )));
        }
        match compute_mask_scale(&candidates[i].mask, depth, cam) {
            Ok(scale) => triplets.push(MaskTriplet {
                mask_index: i,
                mask: candidates[i].mask.clone(),
                confidence: candidates[i].confidence,
                embedding: emb.iter().map(|v| v / norm).collect(),
                scale,
            }),
            Err(Error::Numeric(reason)) => {
                dropped.push(DroppedMask { mask_index: i, reason });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(ViewSupervision { view_id: view_id.to_string(), triplets, dropped })
}

#[derive(Deserialize)]
struct MaskIndexFile {
    masks: Vec<MaskIndexEntry>,
}

#[derive(Deserialize)]
struct MaskIndexEntry {
    file: String,
    confidence: f64,
}

/// Loads a view's mask candidates from `masks/<view_id>/index.json`
/// (entries `{"file": "000.png", "confidence": 0.93}`) with the PNGs
/// resolved relative to the index file.
pub fn load_mask_candidates(dataset_root: &Path, view_id: &str) -> Result<Vec<MaskCandidate>> {
    let dir = dataset_root.join("masks").join(view_id);
    let index_path = dir.join("index.json");
    let file = File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: MaskIndexFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(&index_path, format!("bad mask index: {e}")))?;
    index
        .masks
        .iter()
        .map(|entry| {
            let mask = BinaryMask::load_png(&dir.join(&entry.file))?;
            Ok(MaskCandidate { mask, confidence: entry.confidence })
        })
        .collect()
}

/// Loads the view's per-mask embeddings from `embeddings/<view_id>.f32`:
/// raw little-endian f32, one `dim`-wide row per mask in index order.
pub fn load_mask_embeddings(
    dataset_root: &Path,
    view_id: &str,
    n_masks: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let path = dataset_root.join("embeddings").join(format!("{view_id}.f32"));
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = BufReader::new(file);
    let mut rows = Vec::with_capacity(n_masks);
    for i in 0..n_masks {
        let row = io::read_f32s(&mut r, dim).map_err(|e| {
            Error::format(&path, format!("embedding row {i} of {n_masks} truncated: {e}"))
        })?;
        rows.push(row.into_iter().map(f64::from).collect());
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| Error::io(&path, e))? != 0 {
        return Err(Error::format(
            &path,
            format!("more data than {n_masks} rows of {dim} floats"),
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};

    fn strip_mask(w: usize, h: usize, x0: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, _| x >= x0 && x < x1)
    }

    #[test]
    fn dedupe_keeps_higher_confidence_duplicate() {
        let cands = vec![
            MaskCandidate { mask: strip_mask(16, 4, 0, 10), confidence: 0.8 },
            MaskCandidate { mask: strip_mask(16, 4, 0, 9), confidence: 0.9 }, // IoU 0.9
            MaskCandidate { mask: strip_mask(16, 4, 12, 16), confidence: 0.75 },
        ];
        let kept = filter_and_dedupe(&cands, 0.7, 0.85).unwrap();
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn dedupe_filters_low_confidence_first() {
        let cands = vec![
            MaskCandidate { mask: strip_mask(16, 4, 0, 8), confidence: 0.69 },
            MaskCandidate { mask: strip_mask(16, 4, 8, 16), confidence: 0.7 },
        ];
        let kept = filter_and_dedupe(&cands, 0.7, 0.9).unwrap();
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn dedupe_confidence_tie_prefers_lower_index() {
        let cands = vec![
            MaskCandidate { mask: strip_mask(16, 4, 0, 10), confidence: 0.8 },
            MaskCandidate { mask: strip_mask(16, 4, 0, 10), confidence: 0.8 },
        ];
        let kept = filter_and_dedupe(&cands, 0.7, 0.9).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn dedupe_iou_exactly_at_threshold_keeps_both() {
        // IoU of [0,9) and [0,10) is 0.9; the rule is strictly-above.
        let cands = vec![
            MaskCandidate { mask: strip_mask(20, 1, 0, 10), confidence: 0.9 },
            MaskCandidate { mask: strip_mask(20, 1, 0, 9), confidence: 0.8 },
        ];
        let kept = filter_and_dedupe(&cands, 0.7, 0.9).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn dedupe_is_input_order_insensitive_for_distinct_confidences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let base: Vec<MaskCandidate> = (0..8)
            .map(|i| MaskCandidate {
                mask: strip_mask(64, 2, i * 6, i * 6 + 12),
                confidence: 0.7 + 0.03 * i as f64 + rng.gen_range(0.0..0.005),
            })
            .collect();
        let kept_ref: Vec<&BinaryMask> = filter_and_dedupe(&base, 0.7, 0.3)
            .unwrap()
            .into_iter()
            .map(|i| &base[i].mask)
            .collect();
        // Reverse the list; surviving masks must be the same set.
        let rev: Vec<MaskCandidate> = base.iter().rev().cloned().collect();
        let kept_rev: Vec<&BinaryMask> = filter_and_dedupe(&rev, 0.7, 0.3)
            .unwrap()
            .into_iter()
            .map(|i| &rev[i].mask)
            .collect();
        assert_eq!(kept_ref.len(), kept_rev.len());
        for m in kept_ref {
            assert!(kept_rev.iter().any(|r| *r == m));
        }
    }

    fn identity_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            width: w,
            height: h,
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[test]
    fn scale_of_two_unit_separated_points_is_one() {
        // Pixels deprojecting to (+-1, 0, z): population std (1, 0, 0).
        let f = 50.0;
        let z = 5.0;
        let cam = Camera { cx: 16.5, cy: 16.5, ..identity_camera(33, 33, f) };
        // x = (u - cx) / f * z = +-1  =>  u = cx +- 10; pixel centers at
        // ix + 0.5 => ix = 26 and 6.
        let mut mask = BinaryMask::new(33, 33);
        mask.set(26, 16, true);
        mask.set(6, 16, true);
        let depth = vec![z; 33 * 33];
        let s = compute_mask_scale(&mask, &depth, &cam).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "scale {s}");
    }

    #[test]
    fn scale_of_disk_is_radius_over_sqrt_two() {
        let (w, h, f, z, r) = (64, 64, 60.0, 4.0, 1.0);
        let cam = identity_camera(w, h, f);
        let mask = BinaryMask::from_fn(w, h, |x, y| {
            let wx = (x as f64 + 0.5 - cam.cx) / f * z;
            let wy = (y as f64 + 0.5 - cam.cy) / f * z;
            wx * wx + wy * wy <= r * r
        });
        assert!(mask.count() > 500, "disk too coarse for the estimate");
        let depth = vec![z; w * h];
        let s = compute_mask_scale(&mask, &depth, &cam).unwrap();
        let expected = r / 2.0f64.sqrt();
        assert!(
            (s - expected).abs() / expected < 0.05,
            "scale {s} vs analytic {expected}"
        );
    }

    #[test]
    fn scale_is_invariant_under_camera_roll() {
        let (w, h, f, z) = (32, 32, 40.0, 3.0);
        let cam = identity_camera(w, h, f);
        let mask = BinaryMask::from_fn(w, h, |x, y| {
            (8..20).contains(&x) && (10..14).contains(&y)
        });
        let mut depth = vec![f64::INFINITY; w * h];
        for (x, y) in mask.iter_set() {
            depth[y * w + x] = z + 0.01 * x as f64;
        }
        // Roll the camera 90 degrees about its optical axis; the same
        // world points then appear at (31 - y, x).
        let roll = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let cam2 = Camera { rotation: roll * cam.rotation, ..cam.clone() };
        let mut mask2 = BinaryMask::new(w, h);
        let mut depth2 = vec![f64::INFINITY; w * h];
        for (x, y) in mask.iter_set() {
            let (x2, y2) = (31 - y, x);
            mask2.set(x2, y2, true);
            depth2[y2 * w + x2] = depth[y * w + x];
        }
        let s1 = compute_mask_scale(&mask, &depth, &cam).unwrap();
        let s2 = compute_mask_scale(&mask2, &depth2, &cam2).unwrap();
        assert!((s1 - s2).abs() < 1e-6, "{s1} vs {s2}");
    }

    #[test]
    fn scale_needs_two_usable_pixels() {
        let cam = identity_camera(8, 8, 10.0);
        let mut mask = BinaryMask::new(8, 8);
        mask.set(3, 3, true);
        mask.set(4, 4, true);
        let mut depth = vec![f64::INFINITY; 64];
        depth[3 * 8 + 3] = 2.0; // only one finite-depth pixel
        let err = compute_mask_scale(&mask, &depth, &cam).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    fn random_unit_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    #[test]
    fn codec_rows_are_orthonormal_and_encode_decode_is_idempotent() {
        let samples = random_unit_embeddings(200, 40, 2);
        let codec = fit_codec(&samples, 8).unwrap();
        assert!(codec.orthonormality_defect() < 1e-10);
        // encode(mean) = 0 and decode(0) = mean.
        let zero = codec.encode(&codec.mean);
        assert!(zero.iter().all(|v| v.abs() < 1e-10));
        let back = codec.decode(&vec![0.0; 8]);
        for (a, b) in back.iter().zip(&codec.mean) {
            assert!((a - b).abs() < 1e-12);
        }
        // Once projected, points are fixed by another round trip.
        let x = &samples[0];
        let once = codec.decode(&codec.encode(x));
        let twice = codec.decode(&codec.encode(&once));
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn codec_reconstruction_matches_spectral_tail() {
        // The mean reconstruction error of a rank-k projector equals the
        // sum of the trailing covariance eigenvalues.
        let samples = random_unit_embeddings(300, 24, 9);
        let k = 6;
        let codec = fit_codec(&samples, k).unwrap();
        let n = samples.len() as f64;
        let in_dim = 24;
        let mean = &codec.mean;
        let centered = DMatrix::from_fn(samples.len(), in_dim, |r, c| samples[r][c] - mean[c]);
        let cov = centered.transpose() * &centered / n;
        let mut eigenvalues: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tail: f64 = eigenvalues[k..].iter().sum();
        let mse: f64 = samples
            .iter()
            .map(|s| {
                let rec = codec.decode(&codec.encode(s));
                s.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum::<f64>()
            / n;
        assert!((mse - tail).abs() < 1e-9, "mse {mse} vs tail {tail}");
    }

    #[test]
    fn codec_full_rank_reconstructs_exactly() {
        let samples = random_unit_embeddings(50, 12, 4);
        let codec = fit_codec(&samples, 12).unwrap();
        let rec = codec.decode(&codec.encode(&samples[3]));
        for (a, b) in rec.iter().zip(&samples[3]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn codec_needs_enough_samples() {
        let samples = random_unit_embeddings(7, 16, 1);
        assert!(fit_codec(&samples, 8).is_err());
    }

    #[test]
    fn codec_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.bin");
        let samples = random_unit_embeddings(100, 32, 6);
        let codec = fit_codec(&samples, 10).unwrap();
        codec.save(&path).unwrap();
        let back = EmbeddingCodec::load(&path).unwrap();
        assert_eq!((back.in_dim, back.out_dim), (32, 10));
        assert!(back.orthonormality_defect() < 1e-5);
        let x = &samples[0];
        let (a, b) = (codec.encode(x), back.encode(x));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn assemble_counts_mismatch_names_the_view() {
        let cam = identity_camera(8, 8, 10.0);
        let cands = vec![MaskCandidate { mask: BinaryMask::new(8, 8), confidence: 0.9 }];
        let err = assemble_view_triplets(
            "train_003",
            &cands,
            &[],
            &vec![1.0; 64],
            &cam,
            &SupervisionConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("train_003"), "{err}");
    }

    #[test]
    fn assemble_drops_degenerate_masks_with_a_record() {
        let cam = identity_camera(8, 8, 10.0);
        let mut good = BinaryMask::new(8, 8);
        for x in 1..6 {
            good.set(x, 2, true);
        }
        let mut lone = BinaryMask::new(8, 8);
        lone.set(7, 7, true);
        let cands = vec![
            MaskCandidate { mask: good, confidence: 0.9 },
            MaskCandidate { mask: lone, confidence: 0.8 },
        ];
        let dim = SupervisionConfig::default().embedding_dim;
        let mut e0 = vec![0.0; dim];
        e0[0] = 2.0;
        let mut e1 = vec![0.0; dim];
        e1[1] = 1.0;
        let depth = vec![3.0; 64];
        let out = assemble_view_triplets(
            "v",
            &cands,
            &[e0, e1],
            &depth,
            &cam,
            &SupervisionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.triplets.len(), 1);
        assert_eq!(out.triplets[0].mask_index, 0);
        // Embeddings come back unit-norm.
        let n: f64 = out.triplets[0].embedding.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].mask_index, 1);
    }

    #[test]
    fn mask_and_embedding_loaders_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let view_dir = root.join("masks").join("v0");
        std::fs::create_dir_all(&view_dir).unwrap();
        let m0 = strip_mask(8, 4, 0, 3);
        let m1 = strip_mask(8, 4, 4, 8);
        m0.save_png(&view_dir.join("000.png")).unwrap();
        m1.save_png(&view_dir.join("001.png")).unwrap();
        std::fs::write(
            view_dir.join("index.json"),
            r#"{"masks":[{"file":"000.png","confidence":0.93},{"file":"001.png","confidence":0.8}]}"#,
        )
        .unwrap();
        let emb_dir = root.join("embeddings");
        std::fs::create_dir_all(&emb_dir).unwrap();
        let mut bytes = Vec::new();
        for row in 0..2 {
            for c in 0..4 {
                bytes.extend_from_slice(&(((row * 4 + c) as f32) * 0.5).to_le_bytes());
            }
        }
        std::fs::write(emb_dir.join("v0.f32"), &bytes).unwrap();

        let cands = load_mask_candidates(root, "v0").unwrap();
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].mask, m0);
        assert!((cands[1].confidence - 0.8).abs() < 1e-12);
        let embs = load_mask_embeddings(root, "v0", 2, 4).unwrap();
        assert_eq!(embs[1], vec![2.0, 2.5, 3.0, 3.5]);
        // Wrong expected count is a format error.
        assert!(load_mask_embeddings(root, "v0", 3, 4).is_err());
        assert!(load_mask_embeddings(root, "v0", 1, 4).is_err());
    }
}
