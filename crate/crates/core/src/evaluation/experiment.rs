//! Declarative experiment configs, the protocol runner and attack reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::{content_key, ArtifactCache};
use super::watermark_sweep::{run_watermark_sweep, Risk, WatermarkScenario, WatermarkSweepConfig, WatermarkSweepReport, EXTERNAL_WATERMARK_MODELS};
use super::{
    density_shift_from_batch, iterative_attack, median_pairwise_distance, random_anchor_set, random_targets,
    run_attack, screened_anchor_set, success_rate, table1_ablation, victim_predictions, AblationLoss, AttackLoss,
    EsmaSetup, IterativeConfig, TargetAveraging,
};
use crate::dataset::{LabeledDataset, PrototypeImageTask};
use crate::error::{invalid, Error, Result};
use crate::generator::{AdversarialBatch, AugmentationPolicy, GeneratorConfig};
use crate::nn::{Activation, ArchSpec, Classifier, Ensemble, Model, OptimizerKind, StepSchedule, TrainConfig};
use crate::seed;
use crate::watermark::mean_psnr;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Table1Ablation,
    TransferMatrix,
    DensityShift,
    #[default]
    Exp1,
    Exp2,
    #[serde(rename = "exp3-lite", alias = "exp3_lite")]
    Exp3Lite,
}

impl Protocol {
    pub fn tag(self) -> &'static str {
        match self {
            Protocol::Table1Ablation => "table1_ablation",
            Protocol::TransferMatrix => "transfer_matrix",
            Protocol::DensityShift => "density_shift",
            Protocol::Exp1 => "exp1",
            Protocol::Exp2 => "exp2",
            Protocol::Exp3Lite => "exp3-lite",
        }
    }

    fn scenario(self) -> Option<WatermarkScenario> {
        match self {
            Protocol::Exp1 => Some(WatermarkScenario::Exp1),
            Protocol::Exp2 => Some(WatermarkScenario::Exp2),
            Protocol::Exp3Lite => Some(WatermarkScenario::Exp3Lite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    #[default]
    Esma,
    BemEsma,
    Gaussian,
    CeIterative,
    SquareRandomAnchor,
    SquareScreenedAnchor,
}

impl AttackMethod {
    pub fn tag(self) -> &'static str {
        match self {
            AttackMethod::Esma => "esma",
            AttackMethod::BemEsma => "bem_esma",
            AttackMethod::Gaussian => "gaussian",
            AttackMethod::CeIterative => "ce_iterative",
            AttackMethod::SquareRandomAnchor => "square_random_anchor",
            AttackMethod::SquareScreenedAnchor => "square_screened_anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Built-in synthetic image task.
    Prototype {
        #[serde(default)]
        task: PrototypeImageTask,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        /// Separate draw used to train generators.
        #[serde(default = "default_attack_per_class")]
        attack_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    /// Saved dataset artifacts; `attack` defaults to `train`.
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        attack: Option<PathBuf>,
    },
}

fn default_train_per_class() -> usize {
    100
}
fn default_attack_per_class() -> usize {
    300
}
fn default_test_per_class() -> usize {
    30
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Prototype {
            task: PrototypeImageTask::default(),
            train_per_class: default_train_per_class(),
            attack_per_class: default_attack_per_class(),
            test_per_class: default_test_per_class(),
        }
    }
}

/// Train, generator-training and evaluation splits.
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub attack: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<ExperimentData> {
        match self {
            DatasetSpec::Prototype {
                task,
                train_per_class,
                attack_per_class,
                test_per_class,
            } => Ok(ExperimentData {
                train: task.generate(*train_per_class, "train")?,
                attack: task.generate(*attack_per_class, "attack")?,
                test: task.generate(*test_per_class, "test")?,
            }),
            DatasetSpec::Files { train, test, attack } => {
                let train = LabeledDataset::load(train)?;
                let attack = match attack {
                    Some(p) => LabeledDataset::load(p)?,
                    None => train.clone(),
                };
                Ok(ExperimentData {
                    train,
                    attack,
                    test: LabeledDataset::load(test)?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityShiftConfig {
    /// Radii as multiples of the median pairwise training distance.
    pub radius_factors: Vec<f64>,
    pub n_bins: usize,
    pub averaging: TargetAveraging,
    /// Samples used to estimate the median distance.
    pub median_samples: usize,
}

impl Default for DensityShiftConfig {
    fn default() -> Self {
        Self {
            radius_factors: vec![0.25, 0.5, 1.0],
            n_bins: 10,
            averaging: TargetAveraging::Assigned,
            median_samples: 400,
        }
    }
}

/// Desk-scale classifier zoo: a plain conv net, a residual net and an MLP.
pub fn default_desk_architectures() -> Vec<ArchSpec> {
    vec![
        ArchSpec::ConvNet {
            widths: vec![16, 32],
            kernel: 3,
        },
        ArchSpec::ResNet { width: 16, blocks: 2 },
        ArchSpec::Mlp {
            hidden: vec![128],
            activation: Activation::Relu,
        },
    ]
}

pub fn default_desk_training() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::AdamW,
        schedule: StepSchedule::Constant { eta: 2e-3 },
        max_epochs: 40,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seed: u64,
    /// Repeats for `density_shift`; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// More than one source forms a logit-averaging ensemble.
    pub sources: Vec<ArchSpec>,
    pub victims: Vec<ArchSpec>,
    pub training: TrainConfig,
    pub validation_fraction: f64,
    pub method: AttackMethod,
    pub esma: EsmaSetup,
    pub iterative: IterativeConfig,
    /// Screening parameter of the loss ablation.
    pub ablation_q: usize,
    pub density: DensityShiftConfig,
    pub watermark: WatermarkSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let zoo = default_desk_architectures();
        Self {
            protocol: Protocol::default(),
            seed: 0,
            seeds: Vec::new(),
            dataset: DatasetSpec::default(),
            sources: vec![zoo[0].clone()],
            victims: zoo[1..].to_vec(),
            training: default_desk_training(),
            validation_fraction: 0.2,
            method: AttackMethod::Esma,
            esma: EsmaSetup::default(),
            iterative: IterativeConfig::default(),
            ablation_q: 10,
            density: DensityShiftConfig::default(),
            watermark: WatermarkSweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks structural invariants and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(invalid("at least one source model is required"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(invalid("validation_fraction must lie in (0, 1)"));
        }
        let table1 = self.protocol == Protocol::Table1Ablation;
        if !table1 && self.protocol.scenario().is_none() {
            if let Some(v) = self.victims.iter().find(|v| self.sources.contains(v)) {
                return Err(invalid(format!("victim {} is also a source model", v.name())));
            }
        }
        if table1 && self.sources.len() + self.victims.len() < 2 {
            return Err(invalid("the loss ablation needs at least two models"));
        }
        if self.protocol == Protocol::TransferMatrix && self.victims.is_empty() {
            return Err(invalid("transfer_matrix needs at least one victim"));
        }
        if self.protocol == Protocol::TransferMatrix && self.method == AttackMethod::Gaussian {
            return Err(invalid("the gaussian method is a watermark baseline; it has no target labels"));
        }
        if self.protocol.scenario().is_some()
            && !matches!(self.method, AttackMethod::Esma | AttackMethod::BemEsma)
        {
            return Err(invalid("watermark protocols attack with esma or bem_esma (gaussian runs as the baseline)"));
        }
        if self.density.radius_factors.iter().any(|f| !(*f > 0.0)) || self.density.n_bins == 0 {
            return Err(invalid("density radius factors and bin count must be positive"));
        }
        if let DatasetSpec::Files { train, test, attack } = &self.dataset {
            for p in [Some(train), Some(test), attack.as_ref()].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p.display().to_string()));
                }
            }
        }
        self.esma.generator.validate()?;
        if self.protocol.scenario().is_some() {
            self.watermark.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// ESMA setup with the method's augmentation and a seed-derived generator.
    fn attack_setup(&self, run_seed: u64) -> EsmaSetup {
        let bem = match self.method {
            AttackMethod::BemEsma => Some(self.esma.bem.clone().unwrap_or_else(AugmentationPolicy::default)),
            _ => None,
        };
        EsmaSetup {
            bem,
            generator: GeneratorConfig {
                seed: seed::derive_seed(run_seed, "generator"),
                ..self.esma.generator.clone()
            },
            ..self.esma.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Reports.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TargetedSuccess,
    ErasureBit,
    ErasureDet,
    TamperBit,
    TamperDet,
    Psnr,
    /// One-sided Mann-Whitney p-value.
    PValue,
}

impl MetricKind {
    fn is_rate(self) -> bool {
        !matches!(self, MetricKind::Psnr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub id: String,
    pub metric: MetricKind,
    pub value: Option<f64>,
    pub n: usize,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricCell {
    fn ok(id: impl Into<String>, metric: MetricKind, value: f64, n: usize) -> Self {
        Self {
            id: id.into(),
            metric,
            value: Some(value),
            n,
            status: CellStatus::Ok,
            note: None,
        }
    }

    fn without_value(id: impl Into<String>, metric: MetricKind, status: CellStatus, note: String) -> Self {
        Self {
            id: id.into(),
            metric,
            value: None,
            n: 0,
            status,
            note: Some(note),
        }
    }
}

/// One per-sample outcome behind a rate cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub cell: String,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub os: String,
    pub arch: String,
    pub crate_version: String,
    pub threads: usize,
}

impl EnvironmentFingerprint {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<MetricCell>,
    pub samples: Vec<SampleRow>,
    pub wall_clock_seconds: f64,
    pub environment: EnvironmentFingerprint,
    /// False when any cell failed.
    pub complete: bool,
    /// Protocol-specific structured results.
    pub details: serde_json::Value,
}

impl AttackReport {
    pub fn cell(&self, id: &str, metric: MetricKind) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.id == id && c.metric == metric)
    }

    pub fn value(&self, id: &str, metric: MetricKind) -> Option<f64> {
        self.cell(id, metric).and_then(|c| c.value)
    }

    /// Range checks, and every rate cell with per-sample rows equals the
    /// mean of those rows.
    pub fn check_consistency(&self) -> Result<()> {
        let mut by_cell: std::collections::HashMap<&str, (f64, usize)> = std::collections::HashMap::new();
        for r in &self.samples {
            let e = by_cell.entry(r.cell.as_str()).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
        for c in &self.cells {
            let Some(v) = c.value else {
                if c.status == CellStatus::Ok {
                    return Err(invalid(format!("cell {} is ok but has no value", c.id)));
                }
                continue;
            };
            if c.metric.is_rate() && !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("cell {} rate {v} outside [0, 1]", c.id)));
            }
            if !c.metric.is_rate() && v.is_nan() {
                return Err(invalid(format!("cell {} has a NaN PSNR", c.id)));
            }
            let key = row_key(&c.id, c.metric);
            if let Some(&(sum, n)) = by_cell.get(key.as_str()) {
                if n != c.n {
                    return Err(invalid(format!("cell {key}: {n} rows but n = {}", c.n)));
                }
                let mean = if n == 0 { 0.0 } else { sum / n as f64 };
                if (mean - v).abs() > 1e-12 {
                    return Err(invalid(format!("cell {key}: value {v} but rows average {mean}")));
                }
            }
        }
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "protocol {} (config {}), {} cells, {:.1} s{}\n",
            self.protocol.tag(),
            &self.config_hash[..12.min(self.config_hash.len())],
            self.cells.len(),
            self.wall_clock_seconds,
            if self.complete { "" } else { ", INCOMPLETE" }
        );
        for c in &self.cells {
            let metric = serde_json::to_value(c.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let value = match (c.status, c.value) {
                (CellStatus::Ok, Some(v)) => format!("{v:.4}"),
                (CellStatus::Skipped, _) => "skipped".into(),
                _ => "failed".into(),
            };
            out.push_str(&format!("{:<44} {:<16} {:>10} n={}\n", c.id, metric, value, c.n));
        }
        out
    }

    /// Writes `config.json`, `report.json` and `samples.csv` into a fresh
    /// `run-N` directory under `out/<config hash prefix>/`. Existing runs are
    /// never touched.
    pub fn write(&self, out: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
        self.check_consistency()?;
        let base = out.join(&self.config_hash[..16.min(self.config_hash.len())]);
        std::fs::create_dir_all(&base)?;
        let mut n = 1;
        let dir = loop {
            let d = base.join(format!("run-{n}"));
            match std::fs::create_dir(&d) {
                Ok(()) => break d,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e.into()),
            }
        };
        let atomic = |name: &str, bytes: &[u8]| -> Result<()> {
            let tmp = dir.join(format!(".{name}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, dir.join(name))?;
            Ok(())
        };
        atomic("config.json", &serde_json::to_vec_pretty(config)?)?;
        let mut csv = String::from("cell,index,value\n");
        for r in &self.samples {
            csv.push_str(&format!("{},{},{}\n", r.cell, r.index, r.value));
        }
        atomic("samples.csv", csv.as_bytes())?;
        atomic("report.json", &serde_json::to_vec_pretty(self)?)?;
        Ok(dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn row_key(id: &str, metric: MetricKind) -> String {
    format!("{id}#{}", serde_json::to_value(metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
}

#[derive(Default)]
struct Collector {
    cells: Vec<MetricCell>,
    samples: Vec<SampleRow>,
    complete: bool,
}

impl Collector {
    fn rate(&mut self, id: &str, metric: MetricKind, outcomes: &[f64]) {
        let key = row_key(id, metric);
        let n = outcomes.len();
        let mut sum = 0.0;
        for (i, v) in outcomes.iter().enumerate() {
            sum += v;
            self.samples.push(SampleRow {
                cell: key.clone(),
                index: i,
                value: *v,
            });
        }
        self.cells.push(MetricCell::ok(id, metric, if n == 0 { 0.0 } else { sum / n as f64 }, n));
    }

    fn success(&mut self, id: &str, predictions: &[usize], targets: &[usize]) {
        let o: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| f64::from(u8::from(p == t))).collect();
        self.rate(id, MetricKind::TargetedSuccess, &o);
    }

    fn failed(&mut self, id: &str, metric: MetricKind, err: &Error) {
        self.complete = false;
        self.cells.push(MetricCell::without_value(id, metric, CellStatus::Failed, err.to_string()));
    }
}

// ---------------------------------------------------------------------------
// Runner.

struct Trained {
    name: String,
    key: String,
    model: Model,
}

fn train_models(
    specs: &[ArchSpec],
    role: &str,
    data: &ExperimentData,
    config: &ExperimentConfig,
    run_seed: u64,
    cache: &ArtifactCache,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<Trained>> {
    let (fit, val) = data.train.split(1.0 - config.validation_fraction, seed::derive_seed(run_seed, "validation-split"));
    let k = data.train.num_classes();
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let s = seed::derive_seed(run_seed, &format!("{role}/{i}"));
            let training = TrainConfig {
                seed: s,
                ..config.training.clone()
            };
            let (model, report) = cache.classifier(spec, k, &fit, Some(&val), &training, s)?;
            let key = ArtifactCache::classifier_key(spec, k, &fit, Some(&val), &training, s);
            progress(&format!(
                "{role} {} trained: {} epochs, test accuracy {:.3}",
                spec.name(),
                report.epochs_run,
                crate::nn::accuracy(&model, &data.test)?
            ));
            Ok(Trained {
                name: format!("{}#{i}", spec.name()),
                key,
                model,
            })
        })
        .collect()
}

fn source_batch(
    config: &ExperimentConfig,
    sources: &[Trained],
    data: &ExperimentData,
    targets: &[usize],
    run_seed: u64,
    cache: &ArtifactCache,
) -> Result<AdversarialBatch> {
    let members: Vec<&dyn Classifier> = sources.iter().map(|t| &t.model as &dyn Classifier).collect();
    let ensemble = Ensemble::new(members)?;
    let q = config.ablation_q;
    match config.method {
        AttackMethod::Esma | AttackMethod::BemEsma => {
            let key = content_key(&sources.iter().map(|t| t.key.as_str()).collect::<Vec<_>>());
            let attack = cache.attack(&key, &ensemble, &data.train, &data.attack, &config.attack_setup(run_seed))?;
            run_attack(&attack, &data.test, targets)
        }
        AttackMethod::CeIterative => iterative_attack(&ensemble, &data.test, targets, &AttackLoss::CrossEntropy, &config.iterative),
        AttackMethod::SquareRandomAnchor => {
            let anchors = random_anchor_set(&ensemble, &data.train, q, seed::derive_seed(run_seed, "random-anchors"))?.anchors;
            iterative_attack(&ensemble, &data.test, targets, &AttackLoss::Square { anchors }, &config.iterative)
        }
        AttackMethod::SquareScreenedAnchor => {
            let anchors = screened_anchor_set(&ensemble, &data.train, q)?.anchors;
            iterative_attack(&ensemble, &data.test, targets, &AttackLoss::Square { anchors }, &config.iterative)
        }
        AttackMethod::Gaussian => Err(invalid("gaussian has no target labels")),
    }
}

fn run_table1(config: &ExperimentConfig, cache: &ArtifactCache, out: &mut Collector, progress: &mut dyn FnMut(&str)) -> Result<serde_json::Value> {
    let data = config.dataset.load()?;
    let specs: Vec<ArchSpec> = config.sources.iter().chain(&config.victims).cloned().collect();
    let models = train_models(&specs, "model", &data, config, config.seed, cache, progress)?;
    let named: Vec<(String, &dyn Classifier)> = models.iter().map(|t| (t.name.clone(), &t.model as &dyn Classifier)).collect();
    let report = table1_ablation(&named, &data.train, &data.test, config.ablation_q, &config.iterative, config.seed)?;
    for (ci, c) in report.cells.iter().enumerate() {
        for loss in AblationLoss::ALL {
            let o: Vec<f64> = report
                .hits
                .iter()
                .filter(|h| h.0 == ci && h.1 == loss)
                .map(|h| f64::from(u8::from(h.3)))
                .collect();
            out.rate(&format!("{}->{}/{}", c.source, c.victim, loss.tag()), MetricKind::TargetedSuccess, &o);
        }
    }
    for c in &report.white_box {
        for loss in AblationLoss::ALL {
            out.cells.push(MetricCell::ok(
                format!("{}->{}/{}", c.source, c.victim, loss.tag()),
                MetricKind::TargetedSuccess,
                c.rate(loss),
                c.n,
            ));
        }
    }
    progress(&report.table());
    Ok(serde_json::to_value(&report)?)
}

fn run_transfer(config: &ExperimentConfig, cache: &ArtifactCache, out: &mut Collector, progress: &mut dyn FnMut(&str)) -> Result<serde_json::Value> {
    let data = config.dataset.load()?;
    let sources = train_models(&config.sources, "source", &data, config, config.seed, cache, progress)?;
    let victims = train_models(&config.victims, "victim", &data, config, config.seed, cache, progress)?;
    let targets = random_targets(data.test.labels(), data.test.num_classes(), seed::derive_seed(config.seed, "eval-targets"))?;
    let batch = source_batch(config, &sources, &data, &targets, config.seed, cache)?;
    let src_name = sources.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join("+");
    let method = config.method.tag();
    for t in sources.iter().chain(&victims) {
        let (p, tt) = victim_predictions(&t.model, &batch)?;
        out.success(&format!("{src_name}->{}/{method}", t.name), &p, &tt);
    }
    let idx = batch.attacked();
    let dim = batch.originals.len() / batch.len().max(1);
    let orig: Vec<f64> = idx.iter().flat_map(|&i| batch.original(i).to_vec()).collect();
    let adv: Vec<f64> = idx.iter().flat_map(|&i| batch.adversarial(i).to_vec()).collect();
    out.cells.push(MetricCell::ok(format!("{src_name}/{method}"), MetricKind::Psnr, mean_psnr(&orig, &adv, dim)?, idx.len()));
    Ok(serde_json::json!({ "source": src_name, "method": method, "attacked": idx.len() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySeedResult {
    pub seed: u64,
    pub white_box_success: f64,
    pub median_distance: f64,
    pub reports: Vec<(f64, super::DensityShiftReport)>,
}

/// Trains the surrogate and attack for one seed and measures the density shift.
pub fn density_shift_seed(
    config: &ExperimentConfig,
    data: &ExperimentData,
    run_seed: u64,
    cache: &ArtifactCache,
    progress: &mut dyn FnMut(&str),
) -> Result<DensitySeedResult> {
    let sources = train_models(&config.sources, "source", data, config, run_seed, cache, progress)?;
    let targets = random_targets(data.test.labels(), data.test.num_classes(), seed::derive_seed(run_seed, "eval-targets"))?;
    let batch = source_batch(config, &sources, data, &targets, run_seed, cache)?;
    let members: Vec<&dyn Classifier> = sources.iter().map(|t| &t.model as &dyn Classifier).collect();
    let (p, t) = victim_predictions(&Ensemble::new(members)?, &batch)?;
    let white_box_success = success_rate(&p, &t)?;
    let median_distance = median_pairwise_distance(&data.train, config.density.median_samples, run_seed)?;
    let reports = config
        .density
        .radius_factors
        .iter()
        .map(|&f| {
            let r = density_shift_from_batch(&batch, &data.train, f * median_distance, config.density.n_bins, config.density.averaging)?;
            Ok((f, r))
        })
        .collect::<Result<Vec<_>>>()?;
    progress(&format!(
        "seed {run_seed}: white-box {white_box_success:.3}, p-values {:?}",
        reports.iter().map(|(f, r)| (*f, r.test.p_greater)).collect::<Vec<_>>()
    ));
    Ok(DensitySeedResult {
        seed: run_seed,
        white_box_success,
        median_distance,
        reports,
    })
}

fn run_density(config: &ExperimentConfig, cache: &ArtifactCache, out: &mut Collector, progress: &mut dyn FnMut(&str)) -> Result<serde_json::Value> {
    let data = config.dataset.load()?;
    let mut results = Vec::new();
    for s in config.run_seeds() {
        match density_shift_seed(config, &data, s, cache, progress) {
            Ok(r) => {
                out.cells.push(MetricCell::ok(format!("seed{s}/white_box"), MetricKind::TargetedSuccess, r.white_box_success, r.reports.first().map(|x| x.1.clean.len()).unwrap_or(0)));
                for (f, rep) in &r.reports {
                    out.cells.push(MetricCell::ok(format!("seed{s}/r{f}"), MetricKind::PValue, rep.test.p_greater, rep.clean.len()));
                }
                results.push(r);
            }
            Err(e @ Error::MissingArtifact(_)) => return Err(e),
            Err(e) => out.failed(&format!("seed{s}"), MetricKind::PValue, &e),
        }
    }
    Ok(serde_json::to_value(&results)?)
}

fn push_sweep(report: &WatermarkSweepReport, scenario: WatermarkScenario, out: &mut Collector) {
    for c in &report.cells {
        for method in ["esma", "gaussian"] {
            for risk in [Risk::Erasure, Risk::Tampering] {
                let rows: Vec<_> = report
                    .samples
                    .iter()
                    .filter(|s| s.length == c.length && s.enterprise == c.enterprise && s.method == method && s.risk == risk)
                    .collect();
                let base = format!(
                    "L{}/{}/{}/{}",
                    c.length,
                    c.regime.tag(),
                    method,
                    if risk == Risk::Erasure { "erasure" } else { "tampering" }
                );
                let bits: Vec<f64> = rows.iter().map(|s| s.bit).collect();
                let det: Vec<f64> = rows.iter().map(|s| f64::from(u8::from(s.detected))).collect();
                let (bk, dk) = match risk {
                    Risk::Erasure => (MetricKind::ErasureBit, MetricKind::ErasureDet),
                    Risk::Tampering => (MetricKind::TamperBit, MetricKind::TamperDet),
                };
                out.rate(&base, bk, &bits);
                out.rate(&base, dk, &det);
            }
        }
        out.cells.push(MetricCell::ok(format!("L{}/{}/watermark", c.length, c.regime.tag()), MetricKind::Psnr, c.watermark_psnr, c.esma.erasure_n));
    }
    for l in &report.lengths {
        out.cells.push(MetricCell::ok(format!("L{}/esma", l.length), MetricKind::Psnr, l.attack_psnr, 0));
        out.cells.push(MetricCell::ok(format!("L{}/gaussian", l.length), MetricKind::Psnr, l.gaussian_psnr, 0));
        if scenario == WatermarkScenario::Exp3Lite {
            for ext in EXTERNAL_WATERMARK_MODELS {
                for risk in ["erasure", "tampering"] {
                    out.cells.push(MetricCell::without_value(
                        format!("L{}/{ext}/esma/{risk}", l.length),
                        MetricKind::ErasureDet,
                        CellStatus::Skipped,
                        format!("no {ext} implementation is registered"),
                    ));
                }
            }
        }
    }
}

fn run_watermark(
    config: &ExperimentConfig,
    scenario: WatermarkScenario,
    cache: &ArtifactCache,
    out: &mut Collector,
    progress: &mut dyn FnMut(&str),
) -> Result<serde_json::Value> {
    let mut merged: Option<WatermarkSweepReport> = None;
    let mut sweep = config.watermark.clone();
    sweep.esma.bem = config.attack_setup(config.seed).bem;
    if scenario == WatermarkScenario::Exp2 && sweep.pool_size == 1 {
        let d = WatermarkSweepConfig::for_scenario(WatermarkScenario::Exp2);
        sweep.pool_size = d.pool_size;
        sweep.active_messages = d.active_messages;
    }
    for &length in &config.watermark.lengths {
        let one = WatermarkSweepConfig {
            lengths: vec![length],
            ..sweep.clone()
        };
        match run_watermark_sweep(scenario, &one, cache, progress) {
            Ok(r) => {
                push_sweep(&r, scenario, out);
                progress(&r.table());
                match &mut merged {
                    None => merged = Some(r),
                    Some(m) => {
                        m.cells.extend(r.cells);
                        m.lengths.extend(r.lengths);
                        m.samples.extend(r.samples);
                    }
                }
            }
            Err(e @ Error::MissingArtifact(_)) => return Err(e),
            Err(e) => out.failed(&format!("L{length}"), MetricKind::ErasureDet, &e),
        }
    }
    match merged {
        Some(mut m) => {
            m.samples.clear();
            Ok(serde_json::to_value(&m)?)
        }
        None => Ok(serde_json::Value::Null),
    }
}

/// Runs the configured protocol end to end. Missing artifacts fail fast;
/// other per-cell failures are recorded and mark the report incomplete.
pub fn run_experiment(config: &ExperimentConfig, cache: &ArtifactCache, progress: &mut dyn FnMut(&str)) -> Result<AttackReport> {
    config.validate()?;
    let start = Instant::now();
    let mut out = Collector {
        complete: true,
        ..Default::default()
    };
    let result = match config.protocol {
        Protocol::Table1Ablation => run_table1(config, cache, &mut out, progress),
        Protocol::TransferMatrix => run_transfer(config, cache, &mut out, progress),
        Protocol::DensityShift => run_density(config, cache, &mut out, progress),
        p => run_watermark(config, p.scenario().expect("watermark protocol"), cache, &mut out, progress),
    };
    let details = match result {
        Ok(v) => v,
        Err(e @ Error::MissingArtifact(_)) => return Err(e),
        Err(e) => {
            out.failed("protocol", MetricKind::TargetedSuccess, &e);
            serde_json::Value::Null
        }
    };
    let report = AttackReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol: config.protocol,
        config_hash: config.hash(),
        seed: config.seed,
        cells: out.cells,
        samples: out.samples,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        environment: EnvironmentFingerprint::current(),
        complete: out.complete,
        details,
    };
    report.check_consistency()?;
    Ok(report)
}
