//! Two-stage optimization: a minimal photometric geometry fitter
//! (stage 1) and the main latent/mapper training against mask-aligned
//! supervision (stage 2).
//!
//! Stage 1 runs plain Adam on raw reparametrized Gaussian fields (log
//! scales, unnormalized quaternion, logit opacity) so every gradient step
//! yields a valid scene, with gradients from the analytic backward pass
//! of the reference renderer. There is no densification, cloning, or
//! pruning — pre-trained scenes enter through PLY ingestion instead.
//!
//! Stage 2 freezes geometry entirely: each step samples one view, renders
//! the latent feature map once, and applies two losses. The language loss
//! pushes the language head's output on blended mask pixels toward the
//! mask's compressed embedding (Huber). The contrastive loss samples ray
//! pairs inside masks and pulls/pushes blended instance features at each
//! ray's mask scale. Gradients reach the mapper parameters directly and
//! the per-Gaussian latents through the renderer's contribution records.
//! All sampling comes from one seeded stream, and the parallel pieces
//! merge in fixed order, so fixed seed means bit-identical loss curves at
//! any worker count.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mappers::{
    self, contrastive_loss, huber_loss, l2_normalize, l2_normalize_backward, MapperGrads,
    MapperNet,
};
use crate::raster;
use crate::scene::{Camera, Gaussian3D, GaussianScene};
use crate::supervision::{EmbeddingCodec, MaskTriplet};

/// First-moment/second-moment optimizer state over one flat parameter
/// vector, with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps }
    }

    /// One update with a uniform learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_each(params, grads, |_| lr);
    }

    /// One update with a per-entry learning rate.
    pub fn step_scaled(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64]) {
        assert_eq!(lrs.len(), params.len(), "learning-rate vector length");
        self.step_each(params, grads, |i| lrs[i]);
    }

    fn step_each(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len(), "parameter vector length");
        assert_eq!(grads.len(), self.m.len(), "gradient vector length");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr(i) * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Mean absolute difference between two equally sized value maps, with
/// the gradient on the first argument (`sign / n`; zero residuals get a
/// zero subgradient).
pub fn photometric_l1(rendered: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(rendered.len(), target.len(), "image sizes");
    let n = rendered.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let e = r - t;
            loss += e.abs();
            // f64::signum maps +-0.0 to +-1.0; zero residuals need a
            // zero subgradient or a perfect fit would still drift.
            if e == 0.0 { 0.0 } else { e.signum() / n }
        })
        .collect();
    (loss / n, grad)
}

/// Raw trainable values per Gaussian: mean (3), log scale (3),
/// unnormalized quaternion (4, `w x y z`), logit opacity (1), color (3).
pub const GEOM_PARAMS: usize = 14;

/// Flattens a scene's geometry into the raw parameter vector.
pub fn geometry_params(scene: &GaussianScene) -> Vec<f64> {
    let mut out = Vec::with_capacity(scene.len() * GEOM_PARAMS);
    for g in &scene.gaussians {
        out.extend_from_slice(&[g.mean.x, g.mean.y, g.mean.z]);
        out.extend_from_slice(&[g.scale.x.ln(), g.scale.y.ln(), g.scale.z.ln()]);
        let q = g.rotation.as_ref();
        out.extend_from_slice(&[q.w, q.i, q.j, q.k]);
        out.push((g.opacity / (1.0 - g.opacity)).ln());
        out.extend_from_slice(&g.color);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rebuilds a scene from raw parameters, keeping `base`'s latents. Log
/// scales and logit opacities are clamped to a wide finite window so a
/// divergent step can never produce a scene that fails validation.
pub fn scene_from_params(params: &[f64], base: &GaussianScene) -> GaussianScene {
    assert_eq!(params.len(), base.len() * GEOM_PARAMS, "parameter vector length");
    let gaussians = base
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g0)| {
            let p = &params[i * GEOM_PARAMS..(i + 1) * GEOM_PARAMS];
            Gaussian3D {
                mean: Vector3::new(p[0], p[1], p[2]),
                scale: Vector3::new(
                    p[3].clamp(-20.0, 20.0).exp(),
                    p[4].clamp(-20.0, 20.0).exp(),
                    p[5].clamp(-20.0, 20.0).exp(),
                ),
                rotation: UnitQuaternion::from_quaternion(Quaternion::new(p[6], p[7], p[8], p[9])),
                opacity: sigmoid(p[10].clamp(-16.0, 16.0)),
                color: [p[11], p[12], p[13]],
                latent: g0.latent.clone(),
            }
        })
        .collect();
    GaussianScene { gaussians, latent_dim: base.latent_dim }
}

fn stage1_rate_pattern(cfg: &RunConfig) -> [f64; GEOM_PARAMS] {
    let r = &cfg.training.stage1;
    [
        r.mean, r.mean, r.mean,
        r.log_scale, r.log_scale, r.log_scale,
        r.rotation, r.rotation, r.rotation, r.rotation,
        r.opacity,
        r.color, r.color, r.color,
    ]
}

/// Fits geometry photometrically: round-robin over the views, L1 color
/// loss through the reference render path, Adam on the raw parameters.
/// Returns the fitted scene and the per-iteration training loss (the
/// iteration's view rotates, so same-view samples sit `views.len()`
/// apart). Zero configured iterations return the scene unchanged.
pub fn train_geometry(
    scene: &GaussianScene,
    views: &[(Camera, Vec<f64>)],
    cfg: &RunConfig,
) -> Result<(GaussianScene, Vec<f64>)> {
    if views.len() < 2 {
        return Err(Error::Invalid(format!(
            "geometry fitting needs at least two views, got {}",
            views.len()
        )));
    }
    for (i, (cam, img)) in views.iter().enumerate() {
        if img.len() != cam.width * cam.height * 3 {
            return Err(Error::Invalid(format!(
                "view {i}: image of {} values does not match {}x{}x3",
                img.len(),
                cam.width,
                cam.height
            )));
        }
    }
    if cfg.training.stage1_iterations == 0 {
        return Ok((scene.clone(), Vec::new()));
    }

    let mut params = geometry_params(scene);
    let pattern = stage1_rate_pattern(cfg);
    let lrs: Vec<f64> = (0..params.len()).map(|i| pattern[i % GEOM_PARAMS]).collect();
    let t = &cfg.training;
    let mut adam = AdamState::new(params.len(), t.adam_beta1, t.adam_beta2, t.adam_eps);
    let mut curve = Vec::with_capacity(t.stage1_iterations);

    for it in 0..t.stage1_iterations {
        let (cam, img) = &views[it % views.len()];
        let current = scene_from_params(&params, scene);
        let out = raster::oracle_render(&current, cam, &cfg.raster, None);
        let (loss, grad_color) = photometric_l1(&out.color, img);
        curve.push(loss);
        let g = raster::render_color_backward(&current, cam, &cfg.raster, &grad_color);

        let mut grads = vec![0.0f64; params.len()];
        for (i, cg) in current.gaussians.iter().enumerate() {
            let p = &params[i * GEOM_PARAMS..(i + 1) * GEOM_PARAMS];
            let slot = &mut grads[i * GEOM_PARAMS..(i + 1) * GEOM_PARAMS];
            slot[0] = g.mean[i].x;
            slot[1] = g.mean[i].y;
            slot[2] = g.mean[i].z;
            // s = exp(raw), so the chain multiplies by the current scale.
            slot[3] = g.scale[i].x * cg.scale.x;
            slot[4] = g.scale[i].y * cg.scale.y;
            slot[5] = g.scale[i].z * cg.scale.z;
            // Through normalization: remove the radial component, then
            // divide by the raw norm.
            let qn = (p[6] * p[6] + p[7] * p[7] + p[8] * p[8] + p[9] * p[9]).sqrt();
            let qu = [p[6] / qn, p[7] / qn, p[8] / qn, p[9] / qn];
            let gq = g.quat[i];
            let radial: f64 = gq.iter().zip(&qu).map(|(a, b)| a * b).sum();
            for k in 0..4 {
                slot[6 + k] = (gq[k] - radial * qu[k]) / qn;
            }
            slot[10] = g.opacity[i] * cg.opacity * (1.0 - cg.opacity);
            slot[11] = g.color[i][0];
            slot[12] = g.color[i][1];
            slot[13] = g.color[i][2];
        }
        adam.step_scaled(&mut params, &grads, &lrs);
    }
    Ok((scene_from_params(&params, scene), curve))
}

/// One training view for stage 2: a camera plus its mask triplets.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub triplets: Vec<MaskTriplet>,
}

/// One sampled pixel pair for the contrastive loss. Each pixel carries
/// the scale of the mask it was drawn from; a pixel lying in several
/// masks is attributed to the mask that was sampled, so the flag and
/// scales follow mask identity, not pixel identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPair {
    pub pixel_a: (usize, usize),
    pub scale_a: f64,
    pub pixel_b: (usize, usize),
    pub scale_b: f64,
    pub same_mask: bool,
}

/// Draws `n_pairs` pixel pairs from a view's masks: 50/50 same-mask vs
/// cross-mask when at least two non-empty masks exist (all same-mask
/// otherwise), pixels uniform within each mask.
pub fn sample_ray_pairs(
    triplets: &[MaskTriplet],
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RayPair>> {
    let pixels: Vec<Vec<(usize, usize)>> =
        triplets.iter().map(|t| t.mask.iter_set().collect()).collect();
    let scales: Vec<f64> = triplets.iter().map(|t| t.scale).collect();
    sample_ray_pairs_from(&pixels, &scales, n_pairs, rng)
}

/// Worker behind [`sample_ray_pairs`] for callers that precompute the
/// mask pixel lists.
fn sample_ray_pairs_from(
    pixels: &[Vec<(usize, usize)>],
    scales: &[f64],
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RayPair>> {
    let usable: Vec<usize> = (0..pixels.len()).filter(|&i| !pixels[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Invalid(
            "ray sampling needs at least one mask with set pixels".to_string(),
        ));
    }
    let pick = |m: usize, rng: &mut ChaCha8Rng| pixels[m][rng.gen_range(0..pixels[m].len())];
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let same = if usable.len() >= 2 { rng.gen_bool(0.5) } else { true };
        let (ma, mb) = if same {
            let m = usable[rng.gen_range(0..usable.len())];
            (m, m)
        } else {
            let ia = rng.gen_range(0..usable.len());
            let mut ib = rng.gen_range(0..usable.len() - 1);
            if ib >= ia {
                ib += 1;
            }
            (usable[ia], usable[ib])
        };
        out.push(RayPair {
            pixel_a: pick(ma, rng),
            scale_a: scales[ma],
            pixel_b: pick(mb, rng),
            scale_b: scales[mb],
            same_mask: same,
        });
    }
    Ok(out)
}

/// Per-step losses recorded during stage 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub language: f64,
    pub contrastive: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.language + self.contrastive
    }
}

/// Everything stage 2 produces.
#[derive(Debug, Clone)]
pub struct FeatureTraining {
    pub scene: GaussianScene,
    pub language_net: MapperNet,
    pub instance_net: MapperNet,
    pub loss_curve: Vec<LossRecord>,
}

/// Cached instance-head evaluation for one (scale, Gaussian) pair within
/// a step.
struct HeadEval {
    trace: mappers::ForwardTrace,
    y: Vec<f64>,
    norm: f64,
}

/// Trains per-Gaussian latents and both mapper heads; geometry is
/// bit-identical before and after. Pairs whose blended feature norm
/// falls below 1e-6 (a mask pixel the render never touches) are skipped
/// with zero loss. Fixed seed gives bit-identical curves at any worker
/// count.
pub fn train_features(
    scene: &GaussianScene,
    views: &[TrainView],
    codec: &EmbeddingCodec,
    cfg: &RunConfig,
) -> Result<FeatureTraining> {
    if codec.out_dim != cfg.mappers.language_out {
        return Err(Error::Invalid(format!(
            "codec emits {}-wide codes but the language head is {}-wide",
            codec.out_dim, cfg.mappers.language_out
        )));
    }
    // Precompute per view: usable (non-empty-mask) triplets, their set
    // pixels, and their compressed targets.
    struct ViewData {
        view: usize,
        triplets: Vec<usize>,
        pixels: Vec<Vec<(usize, usize)>>,
        scales: Vec<f64>,
        targets: Vec<Vec<f64>>,
    }
    let mut data = Vec::new();
    let mut all_scales = Vec::new();
    for (vi, v) in views.iter().enumerate() {
        let mut vd = ViewData {
            view: vi,
            triplets: Vec::new(),
            pixels: Vec::new(),
            scales: Vec::new(),
            targets: Vec::new(),
        };
        for (ti, t) in v.triplets.iter().enumerate() {
            if t.mask.width != v.camera.width || t.mask.height != v.camera.height {
                return Err(Error::Invalid(format!(
                    "view {vi} triplet {ti}: mask {}x{} does not match the {}x{} camera",
                    t.mask.width, t.mask.height, v.camera.width, v.camera.height
                )));
            }
            if t.embedding.len() != codec.in_dim {
                return Err(Error::Invalid(format!(
                    "view {vi} triplet {ti}: embedding {}-wide, codec expects {}",
                    t.embedding.len(),
                    codec.in_dim
                )));
            }
            let px: Vec<(usize, usize)> = t.mask.iter_set().collect();
            if px.is_empty() {
                continue;
            }
            vd.triplets.push(ti);
            vd.pixels.push(px);
            vd.scales.push(t.scale);
            vd.targets.push(codec.encode(&t.embedding));
            all_scales.push(t.scale);
        }
        if !vd.triplets.is_empty() {
            data.push(vd);
        }
    }
    if data.is_empty() {
        return Err(Error::Invalid(
            "feature training needs at least one non-empty mask triplet".to_string(),
        ));
    }

    let mut language = mappers::language_mapper(&cfg.mappers);
    let mut instance = mappers::instance_mapper(&cfg.mappers);
    let (sm, ss) = mappers::fit_scale_standardization(&all_scales);
    language.scale_mean = sm;
    language.scale_std = ss;
    instance.scale_mean = sm;
    instance.scale_std = ss;

    let mut scene = scene.clone();
    let dim = scene.latent_dim;
    let n = scene.len();
    let mut latents: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.latent.clone()).collect();

    let t = &cfg.training;
    let mut adam_lat = AdamState::new(latents.len(), t.adam_beta1, t.adam_beta2, t.adam_eps);
    let mut adam_lang =
        AdamState::new(language.param_count(), t.adam_beta1, t.adam_beta2, t.adam_eps);
    let mut adam_inst =
        AdamState::new(instance.param_count(), t.adam_beta1, t.adam_beta2, t.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(t.stage2_iterations);

    for step in 0..t.stage2_iterations {
        let vd = &data[rng.gen_range(0..data.len())];
        let cam = &views[vd.view].camera;
        let out = raster::render(&scene, cam, &cfg.raster, None);
        let mut lang_grads = MapperGrads::zeros_like(&language);
        let mut inst_grads = MapperGrads::zeros_like(&instance);
        let mut latent_grads = vec![0.0f64; latents.len()];

        // Language: Huber on the language head over blended mask pixels,
        // averaged over all sampled (mask, pixel) draws.
        let n_lang = (t.masks_per_step * t.pixels_per_mask) as f64;
        let inv_lang = 1.0 / n_lang;
        let mut lang_loss = 0.0;
        let mut grad_map = vec![0.0f64; out.width * out.height * dim];
        for _ in 0..t.masks_per_step {
            let mi = rng.gen_range(0..vd.triplets.len());
            for _ in 0..t.pixels_per_mask {
                let (x, y) = vd.pixels[mi][rng.gen_range(0..vd.pixels[mi].len())];
                let input = language.input_for(out.pixel_feature(x, y), vd.scales[mi]);
                let trace = language.forward_trace(&input);
                let (l, mut gout) = huber_loss(trace.output(), &vd.targets[mi], t.huber_delta);
                lang_loss += l;
                for g in &mut gout {
                    *g *= inv_lang;
                }
                let gin = language.backward_into(&trace, &gout, &mut lang_grads);
                let at = (y * out.width + x) * dim;
                for (slot, g) in grad_map[at..at + dim].iter_mut().zip(&gin) {
                    *slot += g;
                }
            }
        }
        lang_loss *= inv_lang;
        let lang_latent_grads =
            raster::render_feature_backward(&out.contrib, &grad_map, n, dim)?;
        for (acc, g) in latent_grads.iter_mut().zip(&lang_latent_grads) {
            *acc += g;
        }

        // Contrastive: blended instance features at each ray's mask
        // scale; per-(scale, Gaussian) head evaluations are shared
        // within the step.
        let pairs = sample_ray_pairs_from(&vd.pixels, &vd.scales, t.ray_pairs_per_step, &mut rng)?;
        let inv_pairs = 1.0 / t.ray_pairs_per_step as f64;
        let mut cache: HashMap<(u64, u32), HeadEval> = HashMap::new();
        let mut con_loss = 0.0;
        for pair in &pairs {
            let blend = |cache: &mut HashMap<(u64, u32), HeadEval>,
                         (x, y): (usize, usize),
                         scale: f64|
             -> (Vec<f64>, f64, usize) {
                let p = y * out.width + x;
                let mut sum = vec![0.0f64; instance.out_dim()];
                for e in out.contrib.pixel(p) {
                    let he = cache.entry((scale.to_bits(), e.index)).or_insert_with(|| {
                        let latent = &latents[e.index as usize * dim..(e.index as usize + 1) * dim];
                        let trace = instance.forward_trace(&instance.input_for(latent, scale));
                        let (y, norm) = l2_normalize(trace.output());
                        HeadEval { trace, y, norm }
                    });
                    for (s, v) in sum.iter_mut().zip(&he.y) {
                        *s += e.weight * v;
                    }
                }
                let (v, norm) = l2_normalize(&sum);
                (v, norm, p)
            };
            let (va, na, pa) = blend(&mut cache, pair.pixel_a, pair.scale_a);
            let (vb, nb, pb) = blend(&mut cache, pair.pixel_b, pair.scale_b);
            if na < 1e-6 || nb < 1e-6 {
                continue;
            }
            let (l, ga, gb) = contrastive_loss(&va, &vb, pair.same_mask, t.contrastive_margin);
            con_loss += l;
            for ((v, norm, p, scale), gup) in [
                ((&va, na, pa, pair.scale_a), ga),
                ((&vb, nb, pb, pair.scale_b), gb),
            ] {
                let gup: Vec<f64> = gup.iter().map(|g| g * inv_pairs).collect();
                let gsum = l2_normalize_backward(v, norm, &gup);
                for e in out.contrib.pixel(p) {
                    let he = &cache[&(scale.to_bits(), e.index)];
                    let gy: Vec<f64> = gsum.iter().map(|g| g * e.weight).collect();
                    let graw = l2_normalize_backward(&he.y, he.norm, &gy);
                    let gin = instance.backward_into(&he.trace, &graw, &mut inst_grads);
                    let at = e.index as usize * dim;
                    for (acc, g) in latent_grads[at..at + dim].iter_mut().zip(&gin) {
                        *acc += g;
                    }
                }
            }
        }
        con_loss *= inv_pairs;

        adam_lat.step(&mut latents, &latent_grads, t.lr_latent);
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.latent.copy_from_slice(&latents[i * dim..(i + 1) * dim]);
        }
        let mut p = language.flat_params();
        adam_lang.step(&mut p, &lang_grads.flatten(), t.lr_mapper);
        language.set_flat_params(&p);
        let mut p = instance.flat_params();
        adam_inst.step(&mut p, &inst_grads.flatten(), t.lr_mapper);
        instance.set_flat_params(&p);

        curve.push(LossRecord { step, language: lang_loss, contrastive: con_loss });
    }

    Ok(FeatureTraining {
        scene,
        language_net: language,
        instance_net: instance,
        loss_curve: curve,
    })
}
