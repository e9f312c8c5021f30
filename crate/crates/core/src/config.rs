//! Run configuration: every tunable constant in one place, loadable from
//! TOML. Unknown keys are rejected so typos fail loudly instead of
//! silently falling back to defaults. Reports embed a hash of the full
//! effective config so results stay traceable to their settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene dataset root (images, PLY, masks, embeddings, annotations).
    pub dataset: Option<PathBuf>,
    /// Pre-trained Gaussian scene; when set, geometry training is skipped.
    pub scene_ply: Option<PathBuf>,
    /// Output directory for checkpoints, masks, and reports.
    pub out_dir: PathBuf,
    /// Master RNG seed; fixed seed means bit-identical reruns.
    pub seed: u64,
    /// Worker threads for rendering (0 = all cores). Results are
    /// byte-identical for any worker count.
    pub workers: usize,
    pub raster: RasterConfig,
    pub supervision: SupervisionConfig,
    pub mappers: MapperConfig,
    pub training: TrainConfig,
    pub grounding: GroundConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            scene_ply: None,
            out_dir: PathBuf::from("out"),
            seed: 42,
            workers: 0,
            raster: RasterConfig::default(),
            supervision: SupervisionConfig::default(),
            mappers: MapperConfig::default(),
            training: TrainConfig::default(),
            grounding: GroundConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    /// Square tile edge in pixels.
    pub tile_size: usize,
    /// Per-contribution opacity ceiling; keeps transmittance positive.
    pub alpha_clamp: f64,
    /// Contributions below this alpha are dropped entirely.
    pub min_alpha: f64,
    /// Squared Mahalanobis footprint cutoff; 9 = a 3-sigma ellipse.
    pub chi2_cutoff: f64,
    /// Front-to-back blending stops once transmittance falls below this.
    pub transmittance_eps: f64,
    /// Pixels with accumulated alpha below this report depth = +inf.
    pub depth_alpha_min: f64,
    /// Gaussians with camera-space depth at or below this are culled.
    pub near_plane: f64,
    /// Added to both diagonal entries of the projected 2-d covariance so
    /// sub-pixel Gaussians still cover at least about one pixel.
    pub dilation: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            alpha_clamp: 0.99,
            min_alpha: 1.0 / 255.0,
            chi2_cutoff: 9.0,
            transmittance_eps: 1e-4,
            depth_alpha_min: 1e-3,
            near_plane: 1e-4,
            dilation: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionConfig {
    /// Mask candidates below this confidence are discarded.
    pub confidence_min: f64,
    /// Mask pairs with IoU above this are duplicates; one survives.
    pub iou_max: f64,
    /// Raw text/image embedding width.
    pub embedding_dim: usize,
    /// Compressed embedding width used as the language-head target.
    pub codec_dim: usize,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig { confidence_min: 0.7, iou_max: 0.9, embedding_dim: 512, codec_dim: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    /// Width of the single hidden layer in both heads.
    pub hidden_dim: usize,
    /// Language-head output width; must equal `supervision.codec_dim`.
    pub language_out: usize,
    /// Instance-head output width (clustered on the unit hypersphere).
    pub instance_out: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig { hidden_dim: 64, language_out: 64, instance_out: 16, init_seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Geometry-fitting iterations (stage 1).
    pub stage1_iterations: usize,
    /// Feature/mapper iterations (stage 2); geometry is frozen throughout.
    pub stage2_iterations: usize,
    pub lr_latent: f64,
    pub lr_mapper: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Masks sampled per view per stage-2 step for the language loss.
    pub masks_per_step: usize,
    /// Pixels sampled inside each mask for the language loss.
    pub pixels_per_mask: usize,
    /// Pixel pairs sampled per stage-2 step for the contrastive loss.
    pub ray_pairs_per_step: usize,
    /// Huber transition point for the language loss.
    pub huber_delta: f64,
    /// Push-apart margin for the contrastive loss.
    pub contrastive_margin: f64,
    pub stage1: Stage1Rates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iterations: 30_000,
            stage2_iterations: 10_000,
            lr_latent: 5e-3,
            lr_mapper: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            masks_per_step: 8,
            pixels_per_mask: 64,
            ray_pairs_per_step: 256,
            huber_delta: 1.0,
            contrastive_margin: 1.0,
            stage1: Stage1Rates::default(),
        }
    }
}

/// Per-parameter learning rates for the geometry fitter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Rates {
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for Stage1Rates {
    fn default() -> Self {
        Stage1Rates { mean: 2e-3, log_scale: 5e-3, rotation: 1e-3, opacity: 5e-2, color: 1e-2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundConfig {
    /// Smallest Gaussian group HDBSCAN may report.
    pub min_cluster_size: usize,
    /// Clusters born closer than this merge into their parent.
    pub cluster_selection_epsilon: f64,
    /// Whether the hierarchy root itself may be selected as a cluster.
    pub allow_single_cluster: bool,
    /// Background phrases the query must beat in the relevancy ratio.
    pub canonical_phrases: Vec<String>,
    /// Alpha threshold turning a group-only render into the amodal mask.
    pub amodal_tau: f64,
    /// Share of a pixel's unit weight budget a group must win in the
    /// full render to count as visible (modal) there.
    pub modal_rho: f64,
    /// Vision-language service endpoint (POST, JSON).
    pub lvlm_endpoint: Option<String>,
    /// JSON fixture mapping query to response; used in mock mode.
    pub lvlm_fixture: Option<PathBuf>,
    /// Text-embedding service endpoint (POST, JSON).
    pub embedding_endpoint: Option<String>,
    /// JSON fixture mapping phrase to base64 float32 embedding.
    pub embedding_fixture: Option<PathBuf>,
}

impl Default for GroundConfig {
    fn default() -> Self {
        GroundConfig {
            min_cluster_size: 10,
            cluster_selection_epsilon: 0.01,
            allow_single_cluster: false,
            canonical_phrases: ["object", "things", "stuff", "texture"]
                .map(String::from)
                .to_vec(),
            amodal_tau: 0.5,
            modal_rho: 0.5,
            lvlm_endpoint: None,
            lvlm_fixture: None,
            embedding_endpoint: None,
            embedding_fixture: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.raster;
        let checks: [(bool, &str); 12] = [
            (r.tile_size >= 1, "raster.tile_size must be at least 1"),
            (r.alpha_clamp > 0.0 && r.alpha_clamp < 1.0, "raster.alpha_clamp must be in (0,1)"),
            (r.min_alpha >= 0.0 && r.min_alpha < 1.0, "raster.min_alpha must be in [0,1)"),
            (r.chi2_cutoff > 0.0, "raster.chi2_cutoff must be positive"),
            (r.transmittance_eps > 0.0, "raster.transmittance_eps must be positive"),
            (r.near_plane > 0.0, "raster.near_plane must be positive"),
            (r.dilation >= 0.0, "raster.dilation must be non-negative"),
            (
                (0.0..=1.0).contains(&self.supervision.confidence_min),
                "supervision.confidence_min must be in [0,1]",
            ),
            (
                (0.0..=1.0).contains(&self.supervision.iou_max),
                "supervision.iou_max must be in [0,1]",
            ),
            (
                self.supervision.codec_dim > 0
                    && self.supervision.codec_dim <= self.supervision.embedding_dim,
                "supervision.codec_dim must be in [1, embedding_dim]",
            ),
            (self.grounding.min_cluster_size >= 2, "grounding.min_cluster_size must be at least 2"),
            (
                !self.grounding.canonical_phrases.is_empty(),
                "grounding.canonical_phrases must not be empty",
            ),
        ];
        let t = &self.training;
        let s1 = &t.stage1;
        let train_checks: [(bool, &str); 11] = [
            (t.lr_latent > 0.0, "training.lr_latent must be positive"),
            (t.lr_mapper > 0.0, "training.lr_mapper must be positive"),
            (
                (0.0..1.0).contains(&t.adam_beta1) && (0.0..1.0).contains(&t.adam_beta2),
                "training.adam_beta1/2 must be in [0,1)",
            ),
            (t.adam_eps > 0.0, "training.adam_eps must be positive"),
            (t.masks_per_step >= 1, "training.masks_per_step must be at least 1"),
            (t.pixels_per_mask >= 1, "training.pixels_per_mask must be at least 1"),
            (t.ray_pairs_per_step >= 1, "training.ray_pairs_per_step must be at least 1"),
            (t.huber_delta > 0.0, "training.huber_delta must be positive"),
            (t.contrastive_margin >= 0.0, "training.contrastive_margin must be non-negative"),
            (
                s1.mean > 0.0 && s1.log_scale > 0.0 && s1.rotation > 0.0,
                "training.stage1 rates must be positive",
            ),
            (
                s1.opacity > 0.0 && s1.color > 0.0,
                "training.stage1 rates must be positive",
            ),
        ];
        for (ok, msg) in checks.into_iter().chain(train_checks) {
            if !ok {
                return Err(Error::Config(msg.to_string()));
            }
        }
        if self.mappers.language_out != self.supervision.codec_dim {
            return Err(Error::Config(format!(
                "mappers.language_out ({}) must equal supervision.codec_dim ({})",
                self.mappers.language_out, self.supervision.codec_dim
            )));
        }
        Ok(())
    }

    /// The effective config as TOML; what [`RunConfig::hash`] digests.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the serialized effective config; embedded in reports.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
