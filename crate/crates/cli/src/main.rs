//! Pipeline driver: one binary that ingests a scene dataset into a
//! checkpoint, trains the feature field, grounds free-form queries, and
//! scores benchmark annotations.
//!
//! Every tunable lives in one TOML config (all keys optional, unknown
//! keys rejected); `--seed`, `--workers`, and `--out` override it from
//! the command line, and the config hash is embedded in every report so
//! results stay attributable.
//!
//! The checkpoint directory holds `scene.ply` + `scene.latents`,
//! `codec.bin`, `triplets.json` with its mask PNGs, both mapper files,
//! `loss_curve.csv`, and the resolved `config.toml`. Exit codes: 0
//! success, 1 usage, 2 data, 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use splatground::config::RunConfig;
use splatground::error::{Error, ErrorClass, Result};
use splatground::eval::{run_benchmark, BenchmarkArtifacts, SceneDataset, Split};
use splatground::ground::{
    ground, EmbeddingProvider, FixtureEmbedder, GroundView, GroundingRequest, HttpEmbedder,
    HttpLvlm, LvlmClient, MockLvlm,
};
use splatground::mappers::MapperNet;
use splatground::mask::BinaryMask;
use splatground::raster;
use splatground::scene::{
    load_points, load_scene, ply_is_gaussian, save_latents, save_scene, GaussianScene, LATENT_DIM,
};
use splatground::supervision::{
    assemble_view_triplets, fit_codec, load_mask_candidates, load_mask_embeddings, EmbeddingCodec,
    MaskTriplet,
};
use splatground::train::{train_features, train_geometry, TrainView};

#[derive(Parser)]
#[command(
    name = "splatground",
    version,
    about = "Scale-conditioned feature fields on Gaussian scenes: ingest, train, ground, eval"
)]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Use offline fixture clients only; no network access is attempted.
    #[arg(long, global = true)]
    mock: bool,

    /// Worker threads (0 = all cores). Outputs are identical for any value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Master RNG seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Checkpoint/output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the checkpoint: load the scene, assemble mask-embedding-scale
    /// triplets from the dataset, and fit the embedding codec.
    Ingest,
    /// Fit scene geometry to the images (stage 1) and/or the per-Gaussian
    /// latents plus both mapper heads (stage 2).
    Train {
        #[arg(long, value_enum, default_value_t = Stage::Both)]
        stage: Stage,
    },
    /// Resolve one query to a Gaussian group and write modal/amodal masks
    /// for the chosen views.
    Ground {
        /// Free-form query text (explicit name or implicit description).
        query: String,
        /// Target view ids (comma-separated or repeated).
        #[arg(long, required = true, value_delimiter = ',')]
        views: Vec<String>,
    },
    /// Ground every dataset query and score it against the mask
    /// annotations; writes report.csv and report.json.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Geometry,
    Features,
    Both,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests land here too; only real usage
            // errors exit nonzero.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cfg.workers > 0 {
        // Ignore "already initialized": only possible when embedded in a
        // host that set the pool first, and any pool gives the same bytes.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    match cli.cmd {
        Cmd::Ingest => cmd_ingest(&cfg),
        Cmd::Train { stage } => cmd_train(&cfg, stage),
        Cmd::Ground { query, views } => cmd_ground(&cfg, cli.mock, query, views),
        Cmd::Eval => cmd_eval(&cfg, cli.mock),
    }
}

fn dataset_root(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.dataset
        .clone()
        .ok_or_else(|| Error::Config("this command needs `dataset = \"<dir>\"` in the config".to_string()))
}

/// Paths inside the checkpoint directory.
struct Checkpoint {
    dir: PathBuf,
}

impl Checkpoint {
    fn new(dir: &Path) -> Self {
        Checkpoint { dir: dir.to_path_buf() }
    }

    fn scene_ply(&self) -> PathBuf {
        self.dir.join("scene.ply")
    }

    fn latents(&self) -> PathBuf {
        self.dir.join("scene.latents")
    }

    fn codec(&self) -> PathBuf {
        self.dir.join("codec.bin")
    }

    fn language(&self) -> PathBuf {
        self.dir.join("language_mapper.bin")
    }

    fn instance(&self) -> PathBuf {
        self.dir.join("instance_mapper.bin")
    }

    fn triplets_json(&self) -> PathBuf {
        self.dir.join("triplets.json")
    }

    fn load_scene(&self) -> Result<GaussianScene> {
        load_scene(&self.scene_ply(), Some(&self.latents()), LATENT_DIM)
    }

    /// Persists per-view triplets: mask PNGs under `triplets/<view>/` and
    /// one JSON index carrying embeddings (base64 float32), scales, and
    /// confidences. Deterministic bytes for identical inputs.
    fn save_triplets(&self, views: &BTreeMap<String, Vec<MaskTriplet>>) -> Result<()> {
        let mut index = serde_json::Map::new();
        for (view_id, triplets) in views {
            let dir = self.dir.join("triplets").join(view_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut rows = Vec::with_capacity(triplets.len());
            for (i, t) in triplets.iter().enumerate() {
                let rel = format!("triplets/{view_id}/{i:03}.png");
                t.mask.save_png(&self.dir.join(&rel))?;
                rows.push(serde_json::json!({
                    "mask": rel,
                    "mask_index": t.mask_index,
                    "confidence": t.confidence,
                    "scale": t.scale,
                    "embedding": b64_f32(&t.embedding),
                }));
            }
            index.insert(view_id.clone(), rows.into());
        }
        let path = self.triplets_json();
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(index))
            .expect("triplet index serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn load_triplets(&self) -> Result<BTreeMap<String, Vec<MaskTriplet>>> {
        let path = self.triplets_json();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BTreeMap<String, Vec<TripletRow>> = serde_json::from_str(&text)
            .map_err(|e| Error::format(&path, format!("bad triplet index: {e}")))?;
        let mut out = BTreeMap::new();
        for (view_id, rows) in index {
            let mut triplets = Vec::with_capacity(rows.len());
            for row in rows {
                triplets.push(MaskTriplet {
                    mask_index: row.mask_index,
                    mask: BinaryMask::load_png(&self.dir.join(&row.mask))?,
                    confidence: row.confidence,
                    embedding: f32_b64(&row.embedding, &path)?,
                    scale: row.scale,
                });
            }
            out.insert(view_id, triplets);
        }
        Ok(out)
    }
}

#[derive(serde::Deserialize)]
struct TripletRow {
    mask: String,
    mask_index: usize,
    confidence: f64,
    scale: f64,
    embedding: String,
}

fn b64_f32(values: &[f64]) -> String {
    use base64::Engine;
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn f32_b64(text: &str, from: &Path) -> Result<Vec<f64>> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::format(from, format!("bad base64 embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(from, "embedding bytes are not a float32 row".to_string()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect())
}

/// The scene the pipeline starts from: a Gaussian PLY loads directly
/// (latent sidecar beside it, missing = zero latents); a plain point
/// cloud seeds isotropic Gaussians for geometry training.
fn load_or_seed_scene(cfg: &RunConfig, dataset: &SceneDataset) -> Result<GaussianScene> {
    let ply = cfg.scene_ply.clone().unwrap_or_else(|| dataset.points_ply.clone());
    if ply_is_gaussian(&ply)? {
        let sidecar = ply.with_extension("latents");
        load_scene(&ply, Some(&sidecar), LATENT_DIM)
    } else {
        GaussianScene::seed_from_points(&load_points(&ply)?, LATENT_DIM)
    }
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let root = dataset_root(cfg)?;
    let dataset = SceneDataset::load(&root)?;
    let scene = load_or_seed_scene(cfg, &dataset)?;

    let mut per_view: BTreeMap<String, Vec<MaskTriplet>> = BTreeMap::new();
    let mut n_dropped = 0usize;
    for view in dataset.views.iter().filter(|v| v.split == Split::Train) {
        // Views without a mask directory carry no supervision (typical
        // for held-out poses); they are skipped, not an error.
        if !root.join("masks").join(&view.id).join("index.json").is_file() {
            continue;
        }
        let candidates = load_mask_candidates(&root, &view.id)?;
        let embeddings = load_mask_embeddings(
            &root,
            &view.id,
            candidates.len(),
            cfg.supervision.embedding_dim,
        )?;
        let depth = raster::render(&scene, &view.camera, &cfg.raster, None).depth;
        let sup = assemble_view_triplets(
            &view.id,
            &candidates,
            &embeddings,
            &depth,
            &view.camera,
            &cfg.supervision,
        )?;
        n_dropped += sup.dropped.len();
        per_view.insert(view.id.clone(), sup.triplets);
    }
    let n_triplets: usize = per_view.values().map(Vec::len).sum();
    if n_triplets == 0 {
        return Err(Error::Invalid(format!(
            "{}: no view produced a usable supervision triplet",
            root.display()
        )));
    }
    let samples: Vec<Vec<f64>> =
        per_view.values().flatten().map(|t| t.embedding.clone()).collect();
    let codec = fit_codec(&samples, cfg.supervision.codec_dim)?;

    let ck = Checkpoint::new(&cfg.out_dir);
    fs::create_dir_all(&ck.dir).map_err(|e| Error::io(&ck.dir, e))?;
    save_scene(&scene, &ck.scene_ply(), Some(&ck.latents()))?;
    codec.save(&ck.codec())?;
    ck.save_triplets(&per_view)?;
    let cfg_path = ck.dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    println!(
        "ingested {} supervised views: {} triplets kept, {} masks dropped",
        per_view.len(),
        n_triplets,
        n_dropped
    );
    println!(
        "codec {} -> {} dims; checkpoint at {}",
        codec.in_dim,
        codec.out_dim,
        ck.dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let ck = Checkpoint::new(&cfg.out_dir);
    let mut scene = ck.load_scene()?;
    let root = dataset_root(cfg)?;
    let dataset = SceneDataset::load(&root)?;

    // stage, step, photometric, language, contrastive, total
    let mut curve: Vec<String> = vec!["stage,step,photometric,language,contrastive,total".to_string()];

    if matches!(stage, Stage::Geometry | Stage::Both) {
        let mut views = Vec::new();
        for v in dataset.views.iter().filter(|v| v.split == Split::Train) {
            views.push((v.camera.clone(), dataset.load_image(&v.id)?));
        }
        let (fitted, losses) = train_geometry(&scene, &views, cfg)?;
        scene = fitted;
        for (step, loss) in losses.iter().enumerate() {
            curve.push(format!("geometry,{step},{loss},,,{loss}"));
        }
        println!(
            "stage 1: {} iterations over {} views{}",
            losses.len(),
            views.len(),
            losses.last().map(|l| format!(", final photometric {l:.6}")).unwrap_or_default()
        );
    }

    if matches!(stage, Stage::Features | Stage::Both) {
        let codec = EmbeddingCodec::load(&ck.codec())?;
        let stored = ck.load_triplets()?;
        let mut views = Vec::with_capacity(stored.len());
        for (view_id, triplets) in stored {
            let view = dataset.view(&view_id).ok_or_else(|| {
                Error::Invalid(format!(
                    "checkpoint has triplets for view {view_id:?} but the dataset does not know it"
                ))
            })?;
            views.push(TrainView { camera: view.camera.clone(), triplets });
        }
        let trained = train_features(&scene, &views, &codec, cfg)?;
        for r in &trained.loss_curve {
            curve.push(format!(
                "features,{},,{},{},{}",
                r.step,
                r.language,
                r.contrastive,
                r.total()
            ));
        }
        println!(
            "stage 2: {} iterations over {} views{}",
            trained.loss_curve.len(),
            views.len(),
            trained
                .loss_curve
                .last()
                .map(|r| format!(", final loss {:.6}", r.total()))
                .unwrap_or_default()
        );
        trained.language_net.save(&ck.language())?;
        trained.instance_net.save(&ck.instance())?;
        scene = trained.scene;
    }

    // Stage 2 is forbidden from touching geometry, so a features-only run
    // rewrites only the latent sidecar and leaves scene.ply byte-for-byte
    // as ingest (or the geometry stage) wrote it.
    if stage == Stage::Features {
        save_latents(&scene, &ck.latents())?;
    } else {
        save_scene(&scene, &ck.scene_ply(), Some(&ck.latents()))?;
    }
    let curve_path = ck.dir.join("loss_curve.csv");
    let mut text = curve.join("\n");
    text.push('\n');
    fs::write(&curve_path, text).map_err(|e| Error::io(&curve_path, e))?;
    println!("checkpoint updated at {}", ck.dir.display());
    Ok(())
}

/// Builds the grounding view set: every checkpointed supervision view
/// with its camera, triplets, and whole-image embedding from
/// `image_embeddings.json`.
fn build_ground_views(
    ck: &Checkpoint,
    dataset: &SceneDataset,
    cfg: &RunConfig,
) -> Result<Vec<GroundView>> {
    let table = FixtureEmbedder::load(
        &dataset.root.join("image_embeddings.json"),
        cfg.supervision.embedding_dim,
    )?;
    let stored = ck.load_triplets()?;
    let mut out = Vec::with_capacity(stored.len());
    for (view_id, triplets) in stored {
        let view = dataset.view(&view_id).ok_or_else(|| {
            Error::Invalid(format!(
                "checkpoint has triplets for view {view_id:?} but the dataset does not know it"
            ))
        })?;
        out.push(GroundView {
            id: view_id,
            camera: view.camera.clone(),
            image_embedding: table.embed(&view.id)?,
            triplets,
        });
    }
    if out.is_empty() {
        return Err(Error::Invalid("checkpoint holds no supervised views".to_string()));
    }
    Ok(out)
}

/// Picks the vision-language and embedding clients. `--mock` (or absent
/// endpoints) selects the offline fixtures — the dataset's `fixtures/`
/// files by default — and never opens a connection.
fn clients(
    cfg: &RunConfig,
    mock: bool,
    root: &Path,
) -> Result<(Box<dyn LvlmClient>, Box<dyn EmbeddingProvider>)> {
    let lvlm: Box<dyn LvlmClient> = match (&cfg.grounding.lvlm_endpoint, mock) {
        (Some(endpoint), false) => Box::new(HttpLvlm { endpoint: endpoint.clone() }),
        _ => {
            let path = cfg
                .grounding
                .lvlm_fixture
                .clone()
                .unwrap_or_else(|| root.join("fixtures").join("lvlm.json"));
            Box::new(MockLvlm::load(&path)?)
        }
    };
    let embedder: Box<dyn EmbeddingProvider> = match (&cfg.grounding.embedding_endpoint, mock) {
        (Some(endpoint), false) => Box::new(HttpEmbedder {
            endpoint: endpoint.clone(),
            dim: cfg.supervision.embedding_dim,
        }),
        _ => {
            let path = cfg
                .grounding
                .embedding_fixture
                .clone()
                .unwrap_or_else(|| root.join("fixtures").join("embeddings.json"));
            Box::new(FixtureEmbedder::load(&path, cfg.supervision.embedding_dim)?)
        }
    };
    Ok((lvlm, embedder))
}

fn cmd_ground(cfg: &RunConfig, mock: bool, query: String, views: Vec<String>) -> Result<()> {
    let ck = Checkpoint::new(&cfg.out_dir);
    let scene = ck.load_scene()?;
    let language_net = MapperNet::load(&ck.language())?;
    let instance_net = MapperNet::load(&ck.instance())?;
    let codec = EmbeddingCodec::load(&ck.codec())?;
    let root = dataset_root(cfg)?;
    let dataset = SceneDataset::load(&root)?;
    let ground_views = build_ground_views(&ck, &dataset, cfg)?;
    let (lvlm, embedder) = clients(cfg, mock, &root)?;

    let top_down = dataset
        .top_down_view
        .clone()
        .unwrap_or_else(|| ground_views[0].id.clone());
    let request = GroundingRequest {
        query_text: query.clone(),
        top_down_view_id: top_down,
        target_views: views,
    };
    let result = ground(
        &scene,
        &language_net,
        &instance_net,
        &codec,
        &ground_views,
        lvlm.as_ref(),
        embedder.as_ref(),
        &request,
        cfg,
    )?;

    let gdir = cfg.out_dir.join("ground");
    fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
    let mut view_rows = Vec::with_capacity(result.views.len());
    for vm in &result.views {
        let modal = format!("{}_modal.png", vm.view_id);
        let amodal = format!("{}_amodal.png", vm.view_id);
        vm.modal.save_png(&gdir.join(&modal))?;
        vm.amodal.save_png(&gdir.join(&amodal))?;
        view_rows.push(serde_json::json!({
            "view": vm.view_id,
            "modal": modal,
            "amodal": amodal,
            "modal_pixels": vm.modal.count(),
            "amodal_pixels": vm.amodal.count(),
        }));
    }
    // The reference view's relevancy map as a grayscale PNG, for eyeballing.
    let gray: Vec<f64> = result.relevancy.iter().flat_map(|&s| [s, s, s]).collect();
    splatground::io::save_color_png(
        &gdir.join("relevancy.png"),
        result.relevancy_width,
        result.relevancy_height,
        &gray,
    )?;

    let report = serde_json::json!({
        "config_hash": cfg.hash(),
        "query": query,
        "target_phrase": result.target_phrase,
        "explanation": result.explanation,
        "reference_view": result.reference_view,
        "selected_scale": result.selected_scale,
        "group_size": result.group.len(),
        "views": view_rows,
    });
    let report_path = gdir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| Error::io(&report_path, e))?;

    println!(
        "target {:?} via reference view {} (scale {:.4}, group of {})",
        result.target_phrase,
        result.reference_view,
        result.selected_scale,
        result.group.len()
    );
    for vm in &result.views {
        println!(
            "  {}: modal {} px, amodal {} px",
            vm.view_id,
            vm.modal.count(),
            vm.amodal.count()
        );
    }
    println!("masks and report.json in {}", gdir.display());
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".to_string())
}

fn cmd_eval(cfg: &RunConfig, mock: bool) -> Result<()> {
    let ck = Checkpoint::new(&cfg.out_dir);
    let scene = ck.load_scene()?;
    let language_net = MapperNet::load(&ck.language())?;
    let instance_net = MapperNet::load(&ck.instance())?;
    let codec = EmbeddingCodec::load(&ck.codec())?;
    let root = dataset_root(cfg)?;
    let dataset = SceneDataset::load(&root)?;
    let ground_views = build_ground_views(&ck, &dataset, cfg)?;
    let (lvlm, embedder) = clients(cfg, mock, &root)?;

    let artifacts = BenchmarkArtifacts {
        scene: &scene,
        language_net: &language_net,
        instance_net: &instance_net,
        codec: &codec,
        ground_views: &ground_views,
        lvlm: lvlm.as_ref(),
        embedder: embedder.as_ref(),
    };
    let csv_path = cfg.out_dir.join("report.csv");
    let report = run_benchmark(&dataset, &artifacts, cfg, &csv_path)?;
    for row in &report.rows {
        println!(
            "{}: modal {} amodal {} loc {}",
            row.query_id,
            fmt_metric(row.modal_iou),
            fmt_metric(row.amodal_iou),
            fmt_metric(row.loc_acc)
        );
    }
    println!(
        "overall ({} queries): modal {} amodal {} loc {}",
        report.rows.len(),
        fmt_metric(report.overall_modal_iou),
        fmt_metric(report.overall_amodal_iou),
        fmt_metric(report.overall_loc_acc)
    );
    println!("report at {} (+ .json)", csv_path.display());
    Ok(())
}
