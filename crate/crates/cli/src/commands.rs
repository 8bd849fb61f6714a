//! Subcommand implementations. Every command resolves its config, derives a
//! content-addressed run directory and records a [`RunManifest`] there.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use candle_core::DType;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use esma_core::dataset::{smooth_covers, LabeledDataset};
use esma_core::embeddings::{class_mean_features, pretrain_embeddings, EmbeddingBank};
use esma_core::error::Error as CoreError;
use esma_core::evaluation::{
    content_key, random_targets, run_experiment, run_watermark_sweep, screened_anchor_set, AttackReport, ArtifactCache,
    EsmaSetup, ExperimentConfig, ExperimentData, TrainedAttack,
};
use esma_core::generator::{generate_adversarial, AugmentationPolicy, Generator, GeneratorConfig};
use esma_core::nn::{accuracy, Classifier, Model, TrainConfig, TrainReport};
use esma_core::seed::derive_seed;
use esma_core::toy_lab::{
    consistency_report, default_toy_architectures, make_toy_dataset, output_difference_map, train_toy_models, ConsistencyReport, Grid,
    GridReport,
};
use esma_core::watermark::{build_message_pools, mean_psnr, pools_to_text, HiddenConfig};

use crate::config::{
    load_config, seed_override, to_toml, AttackPipelineConfig, ConfigError, PoolsConfig, ToyDensityConfig, WatermarkEvalConfig,
    WatermarkTrainConfig, ENV_CACHE_DIR,
};
use crate::ingest::{ingest_builtin, ingest_directory, IngestManifest};
use crate::plots::{available_kinds, emit_plots, PlotSource};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    /// Requested plot kinds; `None` disables plotting.
    pub plots: Option<Vec<String>>,
    pub out: PathBuf,
}

impl Context {
    fn cache(&self) -> ArtifactCache {
        let root = self
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(ENV_CACHE_DIR).map(PathBuf::from))
            .unwrap_or_else(|| self.out.join("cache"));
        ArtifactCache::new(Some(root))
    }

    fn load<T: DeserializeOwned + Default>(&self) -> Result<T, ConfigError> {
        match &self.config {
            Some(p) => load_config(p),
            None => Ok(T::default()),
        }
    }

    fn seed(&self, configured: u64) -> Result<u64, ConfigError> {
        Ok(seed_override(self.seed)?.unwrap_or(configured))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: String,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ArtifactRef {
    fn new(kind: &str, id: impl Into<String>, path: Option<PathBuf>) -> Self {
        Self {
            kind: kind.into(),
            id: id.into(),
            path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Content address of this run: config, seed and input hashes.
    pub run_id: String,
    pub consumed: Vec<ArtifactRef>,
    pub produced: Vec<ArtifactRef>,
    pub started_unix: f64,
    pub finished_unix: f64,
    #[serde(default)]
    pub notes: serde_json::Value,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
}

impl Run {
    fn start<C: Serialize>(ctx: &Context, subcommand: &str, config: &C, seed: u64, inputs: &[&str]) -> anyhow::Result<Self> {
        let config_json = serde_json::to_value(config)?;
        let mut parts = vec![subcommand.to_string(), config_json.to_string(), seed.to_string()];
        parts.extend(inputs.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let run_id = content_key(&refs);
        let dir = ctx.out.join(subcommand).join(&run_id[..16]);
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            manifest: RunManifest {
                subcommand: subcommand.into(),
                config: config_json,
                seed,
                run_id,
                consumed: Vec::new(),
                produced: Vec::new(),
                started_unix: now(),
                finished_unix: 0.0,
                notes: serde_json::Value::Null,
            },
            dir,
        })
    }

    /// Manifest of an earlier identical run, if it finished.
    fn previous(&self) -> Option<RunManifest> {
        let bytes = std::fs::read(self.dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn consume(&mut self, kind: &str, id: impl Into<String>, path: Option<PathBuf>) {
        self.manifest.consumed.push(ArtifactRef::new(kind, id, path));
    }

    fn produce(&mut self, kind: &str, file: &str) {
        let id = format!("{}/{kind}", &self.manifest.run_id[..16]);
        self.manifest.produced.push(ArtifactRef::new(kind, id, Some(self.dir.join(file))));
    }

    fn write_json<T: Serialize>(&mut self, kind: &str, file: &str, value: &T) -> anyhow::Result<()> {
        std::fs::write(self.dir.join(file), serde_json::to_vec_pretty(value)?)?;
        self.produce(kind, file);
        Ok(())
    }

    fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.manifest.finished_unix = now();
        let tmp = self.dir.join(format!(".{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        std::fs::rename(&tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(self.dir)
    }
}

fn progress(msg: &str) {
    log::info!("{msg}");
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn maybe_plot(ctx: &Context, source: &PlotSource, dir: &Path, report_bytes: &[u8]) -> anyhow::Result<Vec<PathBuf>> {
    let Some(kinds) = &ctx.plots else { return Ok(Vec::new()) };
    let kinds = if kinds.is_empty() { available_kinds(source) } else { kinds.clone() };
    Ok(emit_plots(source, &kinds, &dir.join("plots"), &sha256_hex(report_bytes))?)
}

// ---------------------------------------------------------------------------
// toy-density

/// Toy consistency output: the four curves plus the output-difference grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDensityReport {
    pub config: ToyDensityConfig,
    pub consistency: ConsistencyReport,
    pub grid: GridReport,
    pub training: Vec<TrainReport>,
}

pub fn toy_density(ctx: &Context) -> anyhow::Result<PathBuf> {
    let mut cfg: ToyDensityConfig = ctx.load()?;
    cfg.task.seed = ctx.seed(cfg.task.seed)?;
    cfg.validate()?;
    let mut run = Run::start(ctx, "toy-density", &cfg, cfg.task.seed, &[])?;
    let report_path = run.dir.join("report.json");
    let report: ToyDensityReport = match run.previous() {
        Some(_) if report_path.exists() => {
            progress("toy-density: reusing finished run");
            serde_json::from_slice(&std::fs::read(&report_path)?)?
        }
        _ => {
            let train = make_toy_dataset(&cfg.task)?;
            let validation = cfg.task.sample(cfg.task.n_samples, "validation")?;
            let training = TrainConfig {
                seed: derive_seed(cfg.task.seed, "toy-training"),
                ..cfg.training.clone()
            };
            let trained = train_toy_models(&train, &validation, &default_toy_architectures(), &training)?;
            let models: Vec<&dyn Classifier> = trained.iter().map(|(m, _)| m as &dyn Classifier).collect();
            let consistency = consistency_report(&models, &train, cfg.radius, cfg.n_bins)?;
            let grid = output_difference_map(&cfg.task, &models, &Grid::around(&train, cfg.grid_resolution, 0.1)?)?;
            for c in &consistency.curves {
                progress(&format!("{}: spearman {:?}", c.name, c.spearman));
            }
            run.consume("toy_dataset", train.content_hash(), None);
            ToyDensityReport {
                config: cfg.clone(),
                consistency,
                grid,
                training: trained.into_iter().map(|(_, r)| r).collect(),
            }
        }
    };
    run.write_json("toy_report", "report.json", &report)?;
    let bytes = std::fs::read(&report_path)?;
    for p in maybe_plot(ctx, &PlotSource::Toy(&report), &run.dir, &bytes)? {
        run.manifest.produced.push(ArtifactRef::new("plot", sha256_hex(&std::fs::read(&p)?), Some(p)));
    }
    run.finish()
}

// ---------------------------------------------------------------------------
// Attack pipeline.

struct Pipeline {
    cfg: AttackPipelineConfig,
    seed: u64,
    data: ExperimentData,
}

impl Pipeline {
    fn load(ctx: &Context) -> anyhow::Result<Self> {
        let mut cfg: AttackPipelineConfig = ctx.load()?;
        cfg.seed = ctx.seed(cfg.seed)?;
        cfg.validate()?;
        let data = cfg.dataset.load()?;
        Ok(Self { seed: cfg.seed, cfg, data })
    }

    fn inputs(&self) -> [String; 3] {
        [self.data.train.content_hash(), self.data.attack.content_hash(), self.data.test.content_hash()]
    }

    fn start(&self, ctx: &Context, subcommand: &str, extra: &[&str]) -> anyhow::Result<Run> {
        let inputs = self.inputs();
        let mut all: Vec<&str> = inputs.iter().map(String::as_str).collect();
        all.extend_from_slice(extra);
        let mut run = Run::start(ctx, subcommand, &self.cfg, self.seed, &all)?;
        for (kind, id) in ["train_set", "attack_set", "test_set"].iter().zip(inputs) {
            run.consume(kind, id, None);
        }
        Ok(run)
    }

    /// Cached surrogate and its cache key.
    fn surrogate(&self, cache: &ArtifactCache, run: &mut Run) -> anyhow::Result<(Model, String)> {
        let (fit, val) = self
            .data
            .train
            .split(1.0 - self.cfg.validation_fraction, derive_seed(self.seed, "validation-split"));
        let s = derive_seed(self.seed, "surrogate");
        let training = TrainConfig {
            seed: s,
            ..self.cfg.training.clone()
        };
        let k = self.data.train.num_classes();
        let (model, _) = cache.classifier(&self.cfg.surrogate, k, &fit, Some(&val), &training, s)?;
        let key = ArtifactCache::classifier_key(&self.cfg.surrogate, k, &fit, Some(&val), &training, s);
        progress(&format!("surrogate {} test accuracy {:.3}", self.cfg.surrogate.name(), accuracy(&model, &self.data.test)?));
        run.consume("surrogate", key.clone(), cache.dir("classifiers", &key));
        Ok((model, key))
    }

    fn setup(&self, bem: bool) -> EsmaSetup {
        EsmaSetup {
            bem: bem.then(|| self.cfg.esma.bem.clone().unwrap_or_else(AugmentationPolicy::default)),
            generator: GeneratorConfig {
                seed: derive_seed(self.seed, "generator"),
                ..self.cfg.esma.generator.clone()
            },
            ..self.cfg.esma.clone()
        }
    }
}

pub fn screen_anchors(ctx: &Context) -> anyhow::Result<PathBuf> {
    let p = Pipeline::load(ctx)?;
    let mut run = p.start(ctx, "screen-anchors", &[])?;
    let (model, _) = p.surrogate(&ctx.cache(), &mut run)?;
    let anchors = screened_anchor_set(&model, &p.data.train, p.cfg.esma.q)?;
    anchors.save(&run.dir.join("anchors.json"))?;
    run.produce("anchors", "anchors.json");
    run.finish()
}

pub fn pretrain(ctx: &Context) -> anyhow::Result<PathBuf> {
    let p = Pipeline::load(ctx)?;
    let mut run = p.start(ctx, "pretrain-embeddings", &[])?;
    let (model, _) = p.surrogate(&ctx.cache(), &mut run)?;
    let setup = p.setup(false);
    let means = class_mean_features(&model, &p.data.train)?;
    let bank = EmbeddingBank::init(
        means,
        setup.embedding_width,
        setup.lambda1,
        setup.lambda2,
        derive_seed(setup.generator.seed, "embeddings"),
    )?;
    let (bank, losses) = pretrain_embeddings(&bank, &setup.pretrain)?;
    progress(&format!(
        "manifold loss {:.6} -> {:.6}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    ));
    bank.save(&run.dir.join("embeddings.json"))?;
    run.produce("embedding_bank", "embeddings.json");
    run.write_json("embedding_losses", "embedding_losses.json", &losses)?;
    run.finish()
}

fn save_attack(run: &mut Run, attack: &TrainedAttack) -> anyhow::Result<()> {
    attack.anchors.save(&run.dir.join("anchors.json"))?;
    run.produce("anchors", "anchors.json");
    attack.bank.save(&run.dir.join("embeddings.json"))?;
    run.produce("embedding_bank", "embeddings.json");
    attack.generator.save_checkpoint(&run.dir.join("generator"))?;
    run.produce("generator", "generator");
    run.write_json("train_log", "log.json", &attack.log)
}

/// `train-esma` and `train-bem-esma`.
pub fn train_generator(ctx: &Context, bem: bool) -> anyhow::Result<PathBuf> {
    let p = Pipeline::load(ctx)?;
    let name = if bem { "train-bem-esma" } else { "train-esma" };
    let mut run = p.start(ctx, name, &[])?;
    let cache = ctx.cache();
    let (model, key) = p.surrogate(&cache, &mut run)?;
    let attack = cache.attack(&key, &model, &p.data.train, &p.data.attack, &p.setup(bem))?;
    save_attack(&mut run, &attack)?;
    run.finish()
}

/// Directory `train-esma` (or `train-bem-esma`) writes its generator to for
/// the same config.
pub fn generator_dir(ctx: &Context, bem: bool) -> anyhow::Result<PathBuf> {
    let p = Pipeline::load(ctx)?;
    let run_dir = p.start(ctx, if bem { "train-bem-esma" } else { "train-esma" }, &[])?.dir;
    Ok(run_dir.join("generator"))
}

fn load_input(input: Option<&Path>, size: usize, fallback: &LabeledDataset) -> anyhow::Result<(LabeledDataset, Option<IngestManifest>)> {
    match input {
        None => Ok((fallback.clone(), None)),
        Some(p) if p.is_dir() => {
            let (ds, m) = ingest_directory(p, size)?;
            Ok((ds, Some(m)))
        }
        Some(p) => Ok((LabeledDataset::load(p)?, None)),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[C, H, W]` rows as PNG files (RGB for three channels, grey for one).
pub fn write_images(dir: &Path, shape: &[usize], rows: &[&[f64]]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        _ => anyhow::bail!("images need a [C, H, W] shape, got {shape:?}"),
    };
    let plane = h * w;
    for (i, row) in rows.iter().enumerate() {
        let path = dir.join(format!("{i:05}.png"));
        match c {
            3 => {
                let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let p = y as usize * w + x as usize;
                    image::Rgb([to_u8(row[p]), to_u8(row[plane + p]), to_u8(row[2 * plane + p])])
                });
                img.save(&path)?;
            }
            1 => {
                let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(row[y as usize * w + x as usize])]));
                img.save(&path)?;
            }
            _ => anyhow::bail!("cannot write {c}-channel images"),
        }
    }
    Ok(())
}

pub fn attack(ctx: &Context, input: Option<&Path>, generator: Option<&Path>, bem: bool) -> anyhow::Result<PathBuf> {
    let p = Pipeline::load(ctx)?;
    let gen_dir = match generator {
        Some(g) => g.to_path_buf(),
        None => generator_dir(ctx, bem)?,
    };
    if !gen_dir.join("generator.json").exists() {
        return Err(CoreError::MissingArtifact(format!(
            "no generator checkpoint at {}; run `{}` first or pass --generator",
            gen_dir.display(),
            if bem { "train-bem-esma" } else { "train-esma" }
        ))
        .into());
    }
    let generator = Generator::load_checkpoint(&gen_dir, None, DType::F32)?;
    let size = generator.input_shape().last().copied().unwrap_or(0);
    let (images, ingest) = load_input(input, size, &p.data.test)?;
    let gen_json = std::fs::read(gen_dir.join("generator.json"))?;
    let gen_hash = sha256_hex(&gen_json);
    let mut run = p.start(ctx, "attack", &[&gen_hash, &images.content_hash()])?;
    run.consume("generator", gen_hash, Some(gen_dir.clone()));
    run.consume("images", images.content_hash(), input.map(Path::to_path_buf));
    let k = generator.num_classes();
    let targets = match p.cfg.target {
        Some(t) if t >= k => return Err(ConfigError::Semantic(format!("target {t} outside the {k} generator classes")).into()),
        Some(t) => vec![t; images.len()],
        None => random_targets(images.labels(), k, derive_seed(p.seed, "attack-targets"))?,
    };
    let batch = generate_adversarial(&generator, &images, &targets, 128)?;
    let dim = images.dim();
    let idx = batch.attacked();
    let orig: Vec<f64> = idx.iter().flat_map(|&i| batch.original(i).to_vec()).collect();
    let adv: Vec<f64> = idx.iter().flat_map(|&i| batch.adversarial(i).to_vec()).collect();
    let psnr = if idx.is_empty() { f64::NAN } else { mean_psnr(&orig, &adv, dim)? };
    progress(&format!("attacked {} of {} images, mean PSNR {psnr:.2} dB", idx.len(), batch.len()));
    batch.adversarial_dataset(k)?.save(&run.dir.join("adversarial.safetensors"))?;
    run.produce("adversarial_set", "adversarial.safetensors");
    let rows: Vec<&[f64]> = (0..batch.len()).map(|i| batch.adversarial(i)).collect();
    write_images(&run.dir.join("images"), images.shape(), &rows)?;
    run.produce("adversarial_images", "images");
    run.write_json("targets", "targets.json", &batch.targets)?;
    run.manifest.notes = serde_json::json!({ "attacked": idx.len(), "mean_psnr": psnr, "ingest": ingest });
    run.finish()
}

// ---------------------------------------------------------------------------
// Watermarks.

pub fn train_watermark(ctx: &Context) -> anyhow::Result<PathBuf> {
    let mut cfg: WatermarkTrainConfig = ctx.load()?;
    cfg.seed = ctx.seed(cfg.seed)?;
    cfg.validate()?;
    let covers = smooth_covers(cfg.covers, 3, cfg.image_size, derive_seed(cfg.seed, "covers/hidden"))?;
    let val = smooth_covers(cfg.validation_covers, 3, cfg.image_size, derive_seed(cfg.seed, "covers/hidden-val"))?;
    let hidden = HiddenConfig {
        seed: derive_seed(cfg.seed, "hidden"),
        ..cfg.hidden.clone()
    };
    let mut run = Run::start(ctx, "train-watermark", &cfg, cfg.seed, &[&covers.content_hash(), &val.content_hash()])?;
    run.consume("covers", covers.content_hash(), None);
    let (model, report) = ctx.cache().hidden(&hidden, &covers, &val)?;
    progress(&format!(
        "watermark {} bits: validation bit accuracy {:.3}, PSNR {:.2} dB",
        hidden.message_length, report.validation_bit_accuracy, report.validation_psnr
    ));
    model.save(&run.dir.join("model"))?;
    run.produce("watermark_model", "model");
    run.write_json("train_report", "train.json", &report)?;
    run.finish()
}

pub fn make_pools(ctx: &Context) -> anyhow::Result<PathBuf> {
    let mut cfg: PoolsConfig = ctx.load()?;
    cfg.seed = ctx.seed(cfg.seed)?;
    let pools = build_message_pools(cfg.enterprises, cfg.pool_size, cfg.message_length, cfg.active_messages, cfg.seed)?;
    let mut run = Run::start(ctx, "make-pools", &cfg, cfg.seed, &[])?;
    std::fs::write(run.dir.join("pools.txt"), pools_to_text(&pools))?;
    run.produce("message_pools", "pools.txt");
    run.finish()
}

pub fn eval_watermark(ctx: &Context) -> anyhow::Result<PathBuf> {
    let mut cfg: WatermarkEvalConfig = ctx.load()?;
    cfg.sweep.seed = ctx.seed(cfg.sweep.seed)?;
    cfg.validate()?;
    let mut run = Run::start(ctx, "eval-watermark", &cfg, cfg.sweep.seed, &[])?;
    let cache = ctx.cache();
    let mut report = run_watermark_sweep(cfg.scenario, &cfg.sweep, &cache, &mut |m| progress(m))?;
    progress(&format!("\n{}", report.table()));
    let mut csv = String::from("enterprise,length,regime,attack,metric,value\n");
    for c in &report.cells {
        let lead = format!("{},{},{}", c.enterprise, c.length, c.regime.tag());
        csv.push_str(&format!("{lead},none,watermark_psnr,{}\n", c.watermark_psnr));
        csv.push_str(&format!("{lead},none,hidden_bit_accuracy,{}\n", c.hidden_bit_accuracy));
        for (attack, m) in [("esma", &c.esma), ("gaussian", &c.gaussian)] {
            for (metric, v) in [
                ("erasure_bit", m.erasure_bit),
                ("erasure_det", m.erasure_det),
                ("tamper_bit", m.tamper_bit),
                ("tamper_det", m.tamper_det),
            ] {
                csv.push_str(&format!("{lead},{attack},{metric},{v}\n"));
            }
        }
    }
    std::fs::write(run.dir.join("metrics.csv"), csv)?;
    run.produce("metric_rows", "metrics.csv");
    report.samples.clear();
    run.write_json("sweep_report", "sweep.json", &report)?;
    if ctx.plots.is_some() {
        log::warn!("eval-watermark writes no plots; use `run` with a watermark protocol for erasure and tampering plots");
    }
    run.finish()
}

// ---------------------------------------------------------------------------
// run / plots / ingest

pub fn run(ctx: &Context) -> anyhow::Result<PathBuf> {
    let mut cfg: ExperimentConfig = ctx.load()?;
    cfg.seed = ctx.seed(cfg.seed)?;
    cfg.validate()?;
    let started = now();
    let report = run_experiment(&cfg, &ctx.cache(), &mut |m| progress(m))?;
    progress(&format!("\n{}", report.summary_table()));
    let dir = report.write(&ctx.out, &cfg)?;
    let bytes = std::fs::read(dir.join("report.json"))?;
    let mut produced = vec![
        ArtifactRef::new("report", report.config_hash.clone(), Some(dir.join("report.json"))),
        ArtifactRef::new("samples", report.config_hash.clone(), Some(dir.join("samples.csv"))),
    ];
    for p in maybe_plot(ctx, &PlotSource::Attack(&report), &dir, &bytes)? {
        produced.push(ArtifactRef::new("plot", sha256_hex(&std::fs::read(&p)?), Some(p)));
    }
    let manifest = RunManifest {
        subcommand: "run".into(),
        config: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        run_id: report.config_hash.clone(),
        consumed: Vec::new(),
        produced,
        started_unix: started,
        finished_unix: now(),
        notes: serde_json::json!({ "complete": report.complete, "config_toml": to_toml(&cfg)? }),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(dir)
}

/// Reports the `plots` subcommand understands.
pub enum LoadedReport {
    Toy(ToyDensityReport),
    Attack(AttackReport),
}

pub fn load_report(path: &Path) -> anyhow::Result<(LoadedReport, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|_| CoreError::MissingArtifact(path.display().to_string()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let report = if value.get("schema_version").is_some() {
        LoadedReport::Attack(serde_json::from_value(value)?)
    } else if value.get("consistency").is_some() {
        LoadedReport::Toy(serde_json::from_value(value)?)
    } else {
        anyhow::bail!("{} is neither an experiment nor a toy-density report", path.display());
    };
    Ok((report, bytes))
}

pub fn plots(ctx: &Context, report: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let (loaded, bytes) = load_report(report)?;
    let source = match &loaded {
        LoadedReport::Toy(r) => PlotSource::Toy(r),
        LoadedReport::Attack(r) => PlotSource::Attack(r),
    };
    let kinds = ctx.plots.clone().unwrap_or_default();
    if kinds.is_empty() {
        progress(&format!("no kinds requested; kinds with data: {}", available_kinds(&source).join(", ")));
    }
    Ok(emit_plots(&source, &kinds, &ctx.out.join("plots"), &sha256_hex(&bytes))?)
}

pub fn ingest(ctx: &Context, source: &str, size: usize, count: usize) -> anyhow::Result<PathBuf> {
    let seed = ctx.seed(0)?;
    let (ds, manifest) = match source.strip_prefix("builtin:") {
        Some(tag) => ingest_builtin(tag, size, count, seed)?,
        None => ingest_directory(Path::new(source), size)?,
    };
    let cfg = serde_json::json!({ "source": source, "size": size, "count": count });
    let mut run = Run::start(ctx, "ingest", &cfg, seed, &[&ds.content_hash()])?;
    ds.save(&run.dir.join("dataset.safetensors"))?;
    run.produce("dataset", "dataset.safetensors");
    progress(&format!(
        "{} rows, {} classes, {} skipped, hash {}",
        ds.len(),
        ds.num_classes(),
        manifest.skipped.len(),
        &manifest.content_hash[..16]
    ));
    run.write_json("ingest_manifest", "ingest.json", &manifest)?;
    run.finish()
}
