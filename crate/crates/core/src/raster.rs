//! Tile-based forward rasterizer for Gaussian scenes, an exhaustive
//! reference renderer with the identical per-pixel contract, and the
//! backward pass for rendered latent features.
//!
//! Both renderers share one per-pixel blending routine
//! ([`blend_pixel`]): front-to-back alpha compositing over Gaussians
//! sorted by (depth, index), a hard squared-Mahalanobis footprint cutoff,
//! an alpha clamp, a minimum-alpha skip, and early termination once
//! transmittance drops below a threshold. The tiled path only adds
//! conservative binning (the axis-aligned bound of each footprint
//! ellipse), so its output is byte-identical to the reference path and to
//! itself under any worker count.
//!
//! Rendered feature maps are linear in the latents with weights fixed by
//! geometry, which makes the backward pass an exact transpose: the
//! gradient for Gaussian `i` is the weight-sum of per-pixel upstream
//! gradients wherever `i` contributed. Per-pixel contribution records are
//! kept from the forward pass for exactly this purpose (and for the
//! per-group weight sums behind the modal masks downstream).

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::config::RasterConfig;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scene::{project_gaussian, projection_jacobian, Camera, GaussianScene};

/// One Gaussian's blending weight at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub index: u32,
    pub weight: f64,
}

/// Per-pixel ordered contribution records (front-to-back), CSR-style.
#[derive(Debug, Clone, PartialEq)]
pub struct ContribMap {
    pub offsets: Vec<u32>,
    pub entries: Vec<Contribution>,
}

impl ContribMap {
    pub fn pixel(&self, p: usize) -> &[Contribution] {
        &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }

    pub fn n_pixels(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Full render result. `color` is `H*W*3`, `feature` is `H*W*latent_dim`,
/// `depth`/`alpha` are `H*W`, all row-major. Pixels whose accumulated
/// alpha stays below `RasterConfig::depth_alpha_min` carry `+inf` depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub latent_dim: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub feature: Vec<f64>,
    pub contrib: ContribMap,
}

impl RenderOutput {
    pub fn pixel_color(&self, x: usize, y: usize) -> [f64; 3] {
        let p = (y * self.width + x) * 3;
        [self.color[p], self.color[p + 1], self.color[p + 2]]
    }

    pub fn pixel_feature(&self, x: usize, y: usize) -> &[f64] {
        let p = (y * self.width + x) * self.latent_dim;
        &self.feature[p..p + self.latent_dim]
    }

    /// Alpha thresholded into a silhouette; at `tau == 0` this is the set
    /// of pixels the render touches at all.
    pub fn alpha_mask(&self, tau: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.alpha.iter().map(|&a| a >= tau && a > 0.0).collect(),
        }
    }
}

/// A projected Gaussian prepared for blending.
struct Prepared {
    index: u32,
    depth: f64,
    mean_x: f64,
    mean_y: f64,
    // Conic (inverse 2-d covariance), symmetric: [a b; b c].
    ca: f64,
    cb: f64,
    cc: f64,
    opacity: f64,
    color: [f64; 3],
    // Axis-aligned footprint bound in continuous pixel coordinates.
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

/// Projects the active set and drops Gaussians that cannot contribute:
/// behind the near plane, footprint off-image, opacity below the
/// minimum-alpha skip, or degenerate projected covariance.
fn prepare(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    active: &[usize],
) -> Vec<Prepared> {
    let mut prepared: Vec<Prepared> = active
        .par_iter()
        .filter_map(|&i| {
            let g = &scene.gaussians[i];
            if g.opacity < cfg.min_alpha {
                return None;
            }
            let proj = project_gaussian(cam, g, cfg.near_plane, cfg.dilation)?;
            let (v00, v01, v11) = (proj.cov[(0, 0)], proj.cov[(0, 1)], proj.cov[(1, 1)]);
            let det = v00 * v11 - v01 * v01;
            if !(det > 0.0 && det.is_finite()) {
                return None;
            }
            // The ellipse d2 <= chi2 fits in +-sqrt(chi2 * var) per axis;
            // the tiny pad absorbs rounding so binning stays conservative.
            let ext_x = (cfg.chi2_cutoff * v00).sqrt() + 1e-6;
            let ext_y = (cfg.chi2_cutoff * v11).sqrt() + 1e-6;
            let (x_min, x_max) = (proj.mean.x - ext_x, proj.mean.x + ext_x);
            let (y_min, y_max) = (proj.mean.y - ext_y, proj.mean.y + ext_y);
            // Pixel centers live in (0.5, width - 0.5).
            if x_max < 0.5 || x_min > cam.width as f64 - 0.5 || y_max < 0.5
                || y_min > cam.height as f64 - 0.5
            {
                return None;
            }
            Some(Prepared {
                index: i as u32,
                depth: proj.depth,
                mean_x: proj.mean.x,
                mean_y: proj.mean.y,
                ca: v11 / det,
                cb: -v01 / det,
                cc: v00 / det,
                opacity: g.opacity,
                color: g.color,
                x_min,
                x_max,
                y_min,
                y_max,
            })
        })
        .collect();
    prepared.sort_unstable_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("finite depths")
            .then(a.index.cmp(&b.index))
    });
    prepared
}

/// Blends one pixel front-to-back over `items` (already sorted by depth
/// then index). Writes the feature accumulation into `feature` (zeroed,
/// `latent_dim` wide) and appends contribution records. Returns
/// `(color, depth_numerator, alpha)`.
#[allow(clippy::too_many_arguments)]
fn blend_pixel(
    items: &[&Prepared],
    scene: &GaussianScene,
    px: f64,
    py: f64,
    cfg: &RasterConfig,
    feature: &mut [f64],
    contribs: &mut Vec<Contribution>,
) -> ([f64; 3], f64, f64) {
    let mut color = [0.0f64; 3];
    let mut depth_num = 0.0f64;
    let mut alpha_sum = 0.0f64;
    let mut transmittance = 1.0f64;
    for it in items {
        let dx = px - it.mean_x;
        let dy = py - it.mean_y;
        let d2 = it.ca * dx * dx + 2.0 * it.cb * dx * dy + it.cc * dy * dy;
        if !(d2 <= cfg.chi2_cutoff) {
            continue;
        }
        let alpha = (it.opacity * (-0.5 * d2).exp()).min(cfg.alpha_clamp);
        if alpha < cfg.min_alpha {
            continue;
        }
        let w = alpha * transmittance;
        color[0] += w * it.color[0];
        color[1] += w * it.color[1];
        color[2] += w * it.color[2];
        depth_num += w * it.depth;
        alpha_sum += w;
        let latent = &scene.gaussians[it.index as usize].latent;
        for (f, l) in feature.iter_mut().zip(latent) {
            *f += w * l;
        }
        contribs.push(Contribution { index: it.index, weight: w });
        transmittance *= 1.0 - alpha;
        if transmittance < cfg.transmittance_eps {
            break;
        }
    }
    (color, depth_num, alpha_sum)
}

fn resolve_active(scene: &GaussianScene, subset: Option<&[usize]>) -> Vec<usize> {
    match subset {
        None => (0..scene.len()).collect(),
        Some(s) => {
            let mut v: Vec<usize> = s.to_vec();
            v.sort_unstable();
            v.dedup();
            for &i in &v {
                assert!(i < scene.len(), "subset index {i} out of range ({} Gaussians)", scene.len());
            }
            v
        }
    }
}

struct TileOut {
    color: Vec<f64>,
    depth_num: Vec<f64>,
    alpha: Vec<f64>,
    feature: Vec<f64>,
    contribs: Vec<Vec<Contribution>>,
}

/// Tiled forward render of the active set (`None` = whole scene).
/// Deterministic: byte-identical output for any worker count.
pub fn render(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    subset: Option<&[usize]>,
) -> RenderOutput {
    let active = resolve_active(scene, subset);
    let prepared = prepare(scene, cam, cfg, &active);
    let (w, h, dim) = (cam.width, cam.height, scene.latent_dim);
    let ts = cfg.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);

    // Bin by tile: pixel ix (center ix + 0.5) can see the Gaussian only
    // when ix is in [ceil(x_min - 0.5), floor(x_max - 0.5)]; bin every
    // tile that pixel range touches.
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, p) in prepared.iter().enumerate() {
        let ix_lo = ((p.x_min - 0.5).ceil().max(0.0)) as usize;
        let ix_hi = ((p.x_max - 0.5).floor()).min(w as f64 - 1.0) as usize;
        let iy_lo = ((p.y_min - 0.5).ceil().max(0.0)) as usize;
        let iy_hi = ((p.y_max - 0.5).floor()).min(h as f64 - 1.0) as usize;
        if ix_lo > ix_hi || iy_lo > iy_hi {
            continue;
        }
        for ty in (iy_lo / ts)..=(iy_hi / ts) {
            for tx in (ix_lo / ts)..=(ix_hi / ts) {
                bins[ty * tiles_x + tx].push(pi as u32);
            }
        }
    }

    let tile_results: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let x0 = tx * ts;
            let y0 = ty * ts;
            let tw = ts.min(w - x0);
            let th = ts.min(h - y0);
            let items: Vec<&Prepared> = bins[ti].iter().map(|&pi| &prepared[pi as usize]).collect();
            let mut out = TileOut {
                color: vec![0.0; tw * th * 3],
                depth_num: vec![0.0; tw * th],
                alpha: vec![0.0; tw * th],
                feature: vec![0.0; tw * th * dim],
                contribs: vec![Vec::new(); tw * th],
            };
            for ly in 0..th {
                for lx in 0..tw {
                    let px = (x0 + lx) as f64 + 0.5;
                    let py = (y0 + ly) as f64 + 0.5;
                    let li = ly * tw + lx;
                    let (c, dn, a) = blend_pixel(
                        &items,
                        scene,
                        px,
                        py,
                        cfg,
                        &mut out.feature[li * dim..(li + 1) * dim],
                        &mut out.contribs[li],
                    );
                    out.color[li * 3..li * 3 + 3].copy_from_slice(&c);
                    out.depth_num[li] = dn;
                    out.alpha[li] = a;
                }
            }
            out
        })
        .collect();

    assemble(w, h, dim, ts, tiles_x, cfg, tile_results)
}

/// Stitches per-tile buffers into row-major maps; sequential, so the
/// result does not depend on how tiles were scheduled.
fn assemble(
    w: usize,
    h: usize,
    dim: usize,
    ts: usize,
    tiles_x: usize,
    cfg: &RasterConfig,
    mut tiles: Vec<TileOut>,
) -> RenderOutput {
    let n = w * h;
    let mut color = vec![0.0; n * 3];
    let mut depth = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut feature = vec![0.0; n * dim];
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0u32);
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let ti = (y / ts) * tiles_x + x / ts;
            let (lx, ly) = (x % ts, y % ts);
            let tw = ts.min(w - (x / ts) * ts);
            let li = ly * tw + lx;
            let t = &mut tiles[ti];
            let p = y * w + x;
            color[p * 3..p * 3 + 3].copy_from_slice(&t.color[li * 3..li * 3 + 3]);
            alpha[p] = t.alpha[li];
            depth[p] = if t.alpha[li] >= cfg.depth_alpha_min {
                t.depth_num[li] / t.alpha[li]
            } else {
                f64::INFINITY
            };
            feature[p * dim..(p + 1) * dim].copy_from_slice(&t.feature[li * dim..(li + 1) * dim]);
            entries.extend_from_slice(&t.contribs[li]);
            offsets.push(entries.len() as u32);
        }
    }
    RenderOutput {
        width: w,
        height: h,
        latent_dim: dim,
        color,
        depth,
        alpha,
        feature,
        contrib: ContribMap { offsets, entries },
    }
}

/// Reference renderer: the same per-pixel contract evaluated by walking
/// every prepared Gaussian at every pixel — no tiling, no binning. Exists
/// to pin down [`render`]'s semantics; the two agree byte-for-byte.
pub fn oracle_render(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    subset: Option<&[usize]>,
) -> RenderOutput {
    let active = resolve_active(scene, subset);
    let prepared = prepare(scene, cam, cfg, &active);
    let items: Vec<&Prepared> = prepared.iter().collect();
    let (w, h, dim) = (cam.width, cam.height, scene.latent_dim);
    let n = w * h;
    let mut color = vec![0.0; n * 3];
    let mut depth = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut feature = vec![0.0; n * dim];
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0u32);
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut contribs = Vec::new();
            let (c, dn, a) = blend_pixel(
                &items,
                scene,
                x as f64 + 0.5,
                y as f64 + 0.5,
                cfg,
                &mut feature[p * dim..(p + 1) * dim],
                &mut contribs,
            );
            color[p * 3..p * 3 + 3].copy_from_slice(&c);
            alpha[p] = a;
            depth[p] = if a >= cfg.depth_alpha_min { dn / a } else { f64::INFINITY };
            entries.extend_from_slice(&contribs);
            offsets.push(entries.len() as u32);
        }
    }
    RenderOutput {
        width: w,
        height: h,
        latent_dim: dim,
        color,
        depth,
        alpha,
        feature,
        contrib: ContribMap { offsets, entries },
    }
}

/// Backward pass for the rendered feature map: with blending weights
/// frozen, `feature[p] = sum_i w_i(p) * latent_i`, so
/// `d loss / d latent_i = sum_p w_i(p) * grad[p]`. Gradients accumulate
/// over pixel bands merged in a fixed order, so the result does not
/// depend on worker count.
pub fn render_feature_backward(
    contrib: &ContribMap,
    grad_feature: &[f64],
    n_gaussians: usize,
    latent_dim: usize,
) -> Result<Vec<f64>> {
    let n_pixels = contrib.n_pixels();
    if grad_feature.len() != n_pixels * latent_dim {
        return Err(Error::Invalid(format!(
            "gradient map has {} values; contribution map covers {} pixels x {} channels",
            grad_feature.len(),
            n_pixels,
            latent_dim
        )));
    }
    if let Some(bad) = contrib.entries.iter().find(|e| e.index as usize >= n_gaussians) {
        return Err(Error::Invalid(format!(
            "contribution references Gaussian {} but scene has {}",
            bad.index, n_gaussians
        )));
    }
    let band = 4096usize.max(1);
    let partials: Vec<Vec<f64>> = (0..n_pixels.div_ceil(band))
        .into_par_iter()
        .map(|bi| {
            let mut grad = vec![0.0f64; n_gaussians * latent_dim];
            let start = bi * band;
            let end = (start + band).min(n_pixels);
            for p in start..end {
                let up = &grad_feature[p * latent_dim..(p + 1) * latent_dim];
                for e in contrib.pixel(p) {
                    let g = &mut grad
                        [e.index as usize * latent_dim..(e.index as usize + 1) * latent_dim];
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += e.weight * ui;
                    }
                }
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0f64; n_gaussians * latent_dim];
    for part in partials {
        for (g, p) in grad.iter_mut().zip(&part) {
            *g += p;
        }
    }
    Ok(grad)
}

/// Per-Gaussian gradients of a scalar loss through the rendered color
/// map, expressed on the Gaussians' native fields. Rotation gradients are
/// with respect to the four unit-quaternion components `(w, x, y, z)`
/// before any re-normalization; callers training an unconstrained
/// quaternion project them through the normalization themselves.
#[derive(Debug, Clone)]
pub(crate) struct GeomGrads {
    pub mean: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub quat: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// One surviving blend step at a pixel, recorded for the reverse sweep.
struct BlendStep {
    item: u32,
    dx: f64,
    dy: f64,
    alpha: f64,
    t_before: f64,
    clamped: bool,
}

/// Backward pass for the rendered color map through the full projection
/// chain: blending -> footprint quadratic -> projected covariance and
/// mean -> world-space mean, per-axis scale, rotation, opacity, color.
///
/// The per-pixel sweep repeats [`blend_pixel`]'s walk (same ordering,
/// skips, clamp, and early exit) so the gradient is exact for the loss
/// the forward pass actually computed; discrete inclusion changes
/// (footprint cutoff, minimum alpha, the clamp boundary) take the
/// zero-measure subgradient. Pixel bands accumulate independently and
/// merge in a fixed order, so the result is worker-count independent.
pub(crate) fn render_color_backward(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    grad_color: &[f64],
) -> GeomGrads {
    let (w, h) = (cam.width, cam.height);
    assert_eq!(grad_color.len(), w * h * 3, "color gradient map size");
    let active: Vec<usize> = (0..scene.len()).collect();
    let prepared = prepare(scene, cam, cfg, &active);
    let n = prepared.len();

    // Blend-level accumulators per prepared Gaussian: d mean2d (2),
    // d cov2d as the full-matrix gradient of the symmetric 2x2 (3:
    // g00, g01, g11), d blend opacity (1), d color (3).
    const BW: usize = 9;
    let band = 4096usize;
    let n_pixels = w * h;
    let partials: Vec<Vec<f64>> = (0..n_pixels.div_ceil(band))
        .into_par_iter()
        .map(|bi| {
            let mut acc = vec![0.0f64; n * BW];
            let mut live: Vec<BlendStep> = Vec::new();
            for p in bi * band..((bi + 1) * band).min(n_pixels) {
                let up = &grad_color[p * 3..p * 3 + 3];
                if up == [0.0; 3] {
                    continue;
                }
                let px = (p % w) as f64 + 0.5;
                let py = (p / w) as f64 + 0.5;
                live.clear();
                let mut transmittance = 1.0f64;
                for (ii, it) in prepared.iter().enumerate() {
                    let dx = px - it.mean_x;
                    let dy = py - it.mean_y;
                    let d2 = it.ca * dx * dx + 2.0 * it.cb * dx * dy + it.cc * dy * dy;
                    if !(d2 <= cfg.chi2_cutoff) {
                        continue;
                    }
                    let raw = it.opacity * (-0.5 * d2).exp();
                    let alpha = raw.min(cfg.alpha_clamp);
                    if alpha < cfg.min_alpha {
                        continue;
                    }
                    live.push(BlendStep {
                        item: ii as u32,
                        dx,
                        dy,
                        alpha,
                        t_before: transmittance,
                        clamped: raw > cfg.alpha_clamp,
                    });
                    transmittance *= 1.0 - alpha;
                    if transmittance < cfg.transmittance_eps {
                        break;
                    }
                }
                // Reverse sweep: `suffix` holds sum_{j>i} w_j c_j so the
                // transmittance product's effect on later steps lands on
                // alpha_i as -suffix / (1 - alpha_i).
                let mut suffix = [0.0f64; 3];
                for step in live.iter().rev() {
                    let it = &prepared[step.item as usize];
                    let a = &mut acc[step.item as usize * BW..step.item as usize * BW + BW];
                    let wgt = step.alpha * step.t_before;
                    let mut dalpha = 0.0;
                    for ch in 0..3 {
                        a[6 + ch] += wgt * up[ch];
                        dalpha += up[ch]
                            * (it.color[ch] * step.t_before - suffix[ch] / (1.0 - step.alpha));
                        suffix[ch] += wgt * it.color[ch];
                    }
                    if step.clamped {
                        continue;
                    }
                    a[5] += dalpha * step.alpha / it.opacity;
                    let dd2 = -0.5 * step.alpha * dalpha;
                    let ux = it.ca * step.dx + it.cb * step.dy;
                    let uy = it.cb * step.dx + it.cc * step.dy;
                    a[0] += -2.0 * dd2 * ux;
                    a[1] += -2.0 * dd2 * uy;
                    a[2] += -dd2 * ux * ux;
                    a[3] += -dd2 * ux * uy;
                    a[4] += -dd2 * uy * uy;
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0f64; n * BW];
    for part in partials {
        for (a, p) in acc.iter_mut().zip(&part) {
            *a += p;
        }
    }

    // Chain each prepared Gaussian's blend-level gradient down to its
    // native fields; untouched (culled) Gaussians keep zero gradients.
    let mut out = GeomGrads {
        mean: vec![Vector3::zeros(); scene.len()],
        scale: vec![Vector3::zeros(); scene.len()],
        quat: vec![[0.0; 4]; scene.len()],
        opacity: vec![0.0; scene.len()],
        color: vec![[0.0; 3]; scene.len()],
    };
    let per_gaussian: Vec<(usize, Vector3<f64>, Vector3<f64>, [f64; 4], f64, [f64; 3])> = prepared
        .par_iter()
        .enumerate()
        .map(|(ii, it)| {
            let a9 = &acc[ii * BW..(ii + 1) * BW];
            let idx = it.index as usize;
            let g = &scene.gaussians[idx];
            let t = cam.to_camera(&g.mean);
            let j = projection_jacobian(cam, &t);
            let aj = j * cam.rotation;
            let v3d = g.covariance();
            let rot = *g.rotation.to_rotation_matrix().matrix();
            let m = rot * Matrix3::from_diagonal(&g.scale);
            let gv = Matrix2::new(a9[2], a9[3], a9[3], a9[4]);
            let gm2d = Vector2::new(a9[0], a9[1]);

            // Projected mean: m2d = pi(t); the footprint quadratic also
            // sees t through the linearization Jacobian inside A.
            let mut gt = j.transpose() * gm2d;
            let ga = 2.0 * gv * aj * v3d;
            let gj = ga * cam.rotation.transpose();
            let z2 = t.z * t.z;
            let z3 = z2 * t.z;
            gt.x += gj[(0, 2)] * (-cam.fx / z2);
            gt.y += gj[(1, 2)] * (-cam.fy / z2);
            gt.z += gj[(0, 0)] * (-cam.fx / z2)
                + gj[(1, 1)] * (-cam.fy / z2)
                + gj[(0, 2)] * (2.0 * cam.fx * t.x / z3)
                + gj[(1, 2)] * (2.0 * cam.fy * t.y / z3);
            let gmean = cam.rotation.transpose() * gt;

            // V3D = M M^T with M = R diag(s): the factored chain gives
            // both the per-axis scales and the rotation entries.
            let gv3d = aj.transpose() * gv * aj;
            let gm_mat = 2.0 * gv3d * m;
            let gscale = Vector3::new(
                rot.column(0).dot(&gm_mat.column(0)),
                rot.column(1).dot(&gm_mat.column(1)),
                rot.column(2).dot(&gm_mat.column(2)),
            );
            let gr = gm_mat * Matrix3::from_diagonal(&g.scale);
            let q = g.rotation.as_ref();
            let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
            let dr_dw = Matrix3::new(0.0, -qz, qy, qz, 0.0, -qx, -qy, qx, 0.0) * 2.0;
            let dr_dx =
                Matrix3::new(0.0, qy, qz, qy, -2.0 * qx, -qw, qz, qw, -2.0 * qx) * 2.0;
            let dr_dy =
                Matrix3::new(-2.0 * qy, qx, qw, qx, 0.0, qz, -qw, qz, -2.0 * qy) * 2.0;
            let dr_dz =
                Matrix3::new(-2.0 * qz, -qw, qx, qw, -2.0 * qz, qy, qx, qy, 0.0) * 2.0;
            let gquat = [
                gr.component_mul(&dr_dw).sum(),
                gr.component_mul(&dr_dx).sum(),
                gr.component_mul(&dr_dy).sum(),
                gr.component_mul(&dr_dz).sum(),
            ];
            (idx, gmean, gscale, gquat, a9[5], [a9[6], a9[7], a9[8]])
        })
        .collect();
    for (idx, gmean, gscale, gquat, gop, gcol) in per_gaussian {
        out.mean[idx] = gmean;
        out.scale[idx] = gscale;
        out.quat[idx] = gquat;
        out.opacity[idx] = gop;
        out.color[idx] = gcol;
    }
    out
}

/// Renders only the group and thresholds its alpha: the silhouette the
/// group would have with every occluder removed (amodal mask).
pub fn render_group_amodal(
    scene: &GaussianScene,
    group: &[usize],
    cam: &Camera,
    cfg: &RasterConfig,
    tau: f64,
) -> Result<(BinaryMask, RenderOutput)> {
    if group.is_empty() {
        return Err(Error::Invalid("amodal render of an empty group".into()));
    }
    if let Some(&bad) = group.iter().find(|&&i| i >= scene.len()) {
        return Err(Error::Invalid(format!(
            "group index {bad} out of range ({} Gaussians)",
            scene.len()
        )));
    }
    let out = render(scene, cam, cfg, Some(group));
    Ok((out.alpha_mask(tau), out))
}

/// Visible (modal) mask from a full-scene render: a pixel belongs to the
/// group where the group's summed blending weight exceeds `rho` of the
/// pixel's unit weight budget (per pixel, the blending weights and the
/// leftover background transmittance sum to one, so the comparison is
/// against `rho` itself). Because occluders can only shrink a group's
/// weight, every modal pixel also clears the same threshold in the
/// group's solo render: the modal mask is contained in the amodal one
/// whenever `rho >= tau`.
pub fn modal_mask_from(
    full: &RenderOutput,
    group: &[usize],
    n_gaussians: usize,
    rho: f64,
) -> Result<BinaryMask> {
    if let Some(&bad) = group.iter().find(|&&i| i >= n_gaussians) {
        return Err(Error::Invalid(format!(
            "group index {bad} out of range ({n_gaussians} Gaussians)"
        )));
    }
    let mut member = vec![false; n_gaussians];
    for &i in group {
        member[i] = true;
    }
    let mut mask = BinaryMask::new(full.width, full.height);
    for p in 0..full.contrib.n_pixels() {
        let gw: f64 = full
            .contrib
            .pixel(p)
            .iter()
            .filter(|e| member[e.index as usize])
            .map(|e| e.weight)
            .sum();
        mask.data[p] = gw > rho && gw > 0.0;
    }
    Ok(mask)
}

/// Convenience wrapper rendering the full scene first.
pub fn modal_mask(
    scene: &GaussianScene,
    group: &[usize],
    cam: &Camera,
    cfg: &RasterConfig,
    rho: f64,
) -> Result<BinaryMask> {
    let full = render(scene, cam, cfg, None);
    modal_mask_from(&full, group, scene.len(), rho)
}
