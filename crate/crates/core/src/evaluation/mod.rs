//! Experiment protocols: targeted transfer success, the three-loss iterative
//! ablation, the density-shift analysis, the watermark erasure and tampering
//! sweeps, and persisted attack reports.

mod cache;
mod experiment;
mod watermark_sweep;

pub use cache::{content_key, ArtifactCache};
pub use experiment::*;
pub use watermark_sweep::*;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::density::{bin_index, density_value, DensityMode, DensityQuery};
use crate::embeddings::{class_mean_features, pretrain_embeddings, EmbeddingBank, PretrainConfig};
use crate::error::{invalid, Error, Result};
use crate::generator::{
    generate_adversarial, train_bem_esma, train_esma, AdversarialBatch, AugmentationPolicy, Generator,
    GeneratorConfig, GeneratorTrainLog,
};
use crate::nn::{argmax, cross_entropy_per_sample, dataset_logits, Classifier};
use crate::screening::{per_sample_stats, select_easy_anchors, AnchorSet};
use crate::seed;
use crate::stats::{mann_whitney_greater, MannWhitney};

// ---------------------------------------------------------------------------
// Targeted success.

/// Fraction of `predictions` equal to their `targets`; empty input gives 0.
pub fn success_rate(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} predictions", targets.len()),
            actual: format!("{} predictions", predictions.len()),
        });
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Victim predictions on the attacked (non-skipped) adversarials of `batch`.
pub fn victim_predictions(victim: &dyn Classifier, batch: &AdversarialBatch) -> Result<(Vec<usize>, Vec<usize>)> {
    let attacked = batch.attacked();
    let adv = batch.adversarial_dataset(victim.num_classes())?.subset(&attacked);
    let predictions = dataset_logits(victim, &adv, 256)?.iter().map(|r| argmax(r)).collect();
    Ok((predictions, adv.labels().to_vec()))
}

/// Per-victim fraction of attacked adversarials classified as their target.
pub fn targeted_transfer_success(victims: &[&dyn Classifier], batch: &AdversarialBatch) -> Result<Vec<f64>> {
    victims
        .iter()
        .map(|v| {
            let (p, t) = victim_predictions(*v, batch)?;
            success_rate(&p, &t)
        })
        .collect()
}

/// One target per sample, uniform over the classes other than its label.
pub fn random_targets(labels: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(invalid("targets need at least two classes"));
    }
    let mut rng = seed::child_rng(seed, "targets");
    Ok(labels
        .iter()
        .map(|&y| {
            let t = rng.random_range(0..num_classes - 1);
            if t >= y {
                t + 1
            } else {
                t
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Iterative attacks used by the loss ablation.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            steps: 20,
            momentum: 1.0,
            batch_size: 128,
        }
    }
}

/// Objective minimised by the iterative attack.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackLoss {
    /// Cross-entropy towards the target label.
    CrossEntropy,
    /// `||f(x) - a_t||^2` against per-class anchors.
    Square { anchors: Vec<Vec<f64>> },
}

fn loss_tensor(loss: &AttackLoss, z: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let device = Device::Cpu;
    Ok(match loss {
        AttackLoss::CrossEntropy => {
            let t: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
            cross_entropy_per_sample(z, &Tensor::new(t, &device)?)?.sum_all()?
        }
        AttackLoss::Square { anchors } => {
            let k = z.dim(1)?;
            let rows: Vec<f64> = targets.iter().flat_map(|&t| anchors[t].iter().copied()).collect();
            let a = Tensor::from_vec(rows, (targets.len(), k), &device)?.to_dtype(z.dtype())?;
            (z - a)?.sqr()?.sum_all()?
        }
    })
}

/// Momentum iterative sign-gradient descent on `loss` inside the
/// `epsilon` ball, step `epsilon / steps`, images kept in `[0, 1]`.
pub fn iterative_attack(
    model: &dyn Classifier,
    images: &LabeledDataset,
    targets: &[usize],
    loss: &AttackLoss,
    config: &IterativeConfig,
) -> Result<AdversarialBatch> {
    if targets.len() != images.len() {
        return Err(Error::ShapeMismatch {
            expected: images.len().to_string(),
            actual: targets.len().to_string(),
        });
    }
    if config.steps == 0 || !(config.epsilon > 0.0) {
        return Err(invalid("iterative attack needs steps > 0 and epsilon > 0"));
    }
    if let AttackLoss::Square { anchors } = loss {
        if anchors.len() != model.num_classes() || anchors.iter().any(|a| a.len() != model.num_classes()) {
            return Err(invalid("square loss needs one K-dimensional anchor per class"));
        }
    }
    let device = Device::Cpu;
    let alpha = config.epsilon / config.steps as f64;
    let skipped: Vec<bool> = (0..images.len()).map(|i| images.label(i) == targets[i]).collect();
    let todo: Vec<usize> = (0..images.len()).filter(|&i| !skipped[i]).collect();
    let d = images.dim();
    let mut adversarials = images.data().to_vec();
    for chunk in todo.chunks(config.batch_size.max(1)) {
        let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        let x0 = images.features(chunk, model.dtype(), &device)?;
        let lo = (&x0 - config.epsilon)?.clamp(0.0, 1.0)?;
        let hi = (&x0 + config.epsilon)?.clamp(0.0, 1.0)?;
        let mut x = x0.clone();
        let mut g = x0.zeros_like()?;
        for _ in 0..config.steps {
            let v = Var::from_tensor(&x)?;
            let value = loss_tensor(loss, &model.logits(v.as_tensor())?, &t)?;
            let grad = value
                .backward()?
                .get(v.as_tensor())
                .ok_or_else(|| invalid("no gradient reached the input"))?
                .clone();
            let mut ones = vec![1usize; grad.rank()];
            ones[0] = chunk.len();
            let l1 = grad.abs()?.flatten_from(1)?.mean_keepdim(1)?.clamp(1e-12, f64::MAX)?.reshape(ones)?;
            g = ((g * config.momentum)? + grad.broadcast_div(&l1)?)?;
            x = (x - (g.sign()? * alpha)?)?.maximum(&lo)?.minimum(&hi)?;
        }
        let rows = x.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
        for (&i, row) in chunk.iter().zip(rows) {
            adversarials[i * d..(i + 1) * d].copy_from_slice(&row);
        }
    }
    Ok(AdversarialBatch {
        shape: images.shape().to_vec(),
        originals: images.data().to_vec(),
        sources: images.labels().to_vec(),
        targets: targets.to_vec(),
        adversarials,
        skipped,
    })
}

/// Anchors from `q` uniformly chosen members of each class, no screening.
pub fn random_anchor_set(model: &dyn Classifier, dataset: &LabeledDataset, q: usize, seed: u64) -> Result<AnchorSet> {
    if q == 0 {
        return Err(invalid("q must be positive"));
    }
    let mut rng = seed::child_rng(seed, "random-anchors");
    let mut members = Vec::new();
    for k in 0..dataset.num_classes() {
        let mut idx = dataset.class_indices(k);
        if idx.len() < q {
            return Err(Error::InsufficientSamples {
                class: k,
                available: idx.len(),
                required: q,
            });
        }
        crate::dataset::shuffle(&mut idx, &mut rng);
        idx.truncate(q);
        idx.sort_unstable();
        members.push(idx);
    }
    let logits = dataset_logits(model, dataset, 256)?;
    let member_features: Vec<Vec<Vec<f64>>> =
        members.iter().map(|m| m.iter().map(|&i| logits[i].clone()).collect()).collect();
    let anchors = member_features
        .iter()
        .map(|rows| {
            let mut mean = vec![0.0; rows[0].len()];
            for r in rows {
                mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
            mean
        })
        .collect();
    Ok(AnchorSet {
        q,
        effective_q: vec![q; dataset.num_classes()],
        members,
        member_features,
        anchors,
    })
}

/// Screened anchors with the default per-sample statistics batch.
pub fn screened_anchor_set(model: &dyn Classifier, dataset: &LabeledDataset, q: usize) -> Result<AnchorSet> {
    let stats = per_sample_stats(model, dataset, 64)?;
    select_easy_anchors(&stats, dataset, model, q)
}

// ---------------------------------------------------------------------------
// Loss ablation.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationLoss {
    CrossEntropy,
    SquareRandomAnchor,
    SquareScreenedAnchor,
}

impl AblationLoss {
    pub const ALL: [AblationLoss; 3] = [
        AblationLoss::CrossEntropy,
        AblationLoss::SquareRandomAnchor,
        AblationLoss::SquareScreenedAnchor,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationLoss::CrossEntropy => "ce_iterative",
            AblationLoss::SquareRandomAnchor => "square_random_anchor",
            AblationLoss::SquareScreenedAnchor => "square_screened_anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub source: String,
    pub victim: String,
    /// Attacked samples per rate.
    pub n: usize,
    /// Rates in `AblationLoss::ALL` order.
    pub rates: [f64; 3],
}

impl AblationCell {
    pub fn rate(&self, loss: AblationLoss) -> f64 {
        self.rates[AblationLoss::ALL.iter().position(|l| *l == loss).expect("listed")]
    }

    /// Two standard errors of the screened minus random difference.
    pub fn noise_band(&self) -> f64 {
        let n = self.n.max(1) as f64;
        let s = self.rate(AblationLoss::SquareScreenedAnchor);
        let r = self.rate(AblationLoss::SquareRandomAnchor);
        2.0 * (s * (1.0 - s) / n + r * (1.0 - r) / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub q: usize,
    /// Off-diagonal source to victim cells, sources in model order.
    pub cells: Vec<AblationCell>,
    /// Success of each source against itself, same layout as `cells`.
    pub white_box: Vec<AblationCell>,
    /// Per-sample hits `(cell, loss, sample, hit)` behind every rate.
    pub hits: Vec<(usize, AblationLoss, usize, bool)>,
}

impl AblationReport {
    /// Cells where screened anchors strictly beat random anchors.
    pub fn screened_wins(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| c.rate(AblationLoss::SquareScreenedAnchor) > c.rate(AblationLoss::SquareRandomAnchor))
            .count()
    }

    /// Random anchors are below screened, or above by at most the noise band, in every cell.
    pub fn random_within_noise(&self) -> bool {
        self.cells.iter().all(|c| {
            c.rate(AblationLoss::SquareRandomAnchor) - c.rate(AblationLoss::SquareScreenedAnchor) <= c.noise_band()
        })
    }

    /// Table layout: one row per cell, one column per loss.
    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>8} {:>8} {:>8} {:>6}\n", "source -> victim", "ce", "sq-rand", "sq-scr", "n");
        for c in &self.cells {
            out.push_str(&format!(
                "{:<28} {:>8.3} {:>8.3} {:>8.3} {:>6}\n",
                format!("{} -> {}", c.source, c.victim),
                c.rates[0],
                c.rates[1],
                c.rates[2],
                c.n
            ));
        }
        out
    }
}

/// Runs the three losses from every model against every other model.
///
/// Anchors come from `anchor_set` (each model's own training data); attacks
/// run on `eval` with targets drawn once and shared by all losses.
pub fn table1_ablation(
    models: &[(String, &dyn Classifier)],
    anchor_set: &LabeledDataset,
    eval: &LabeledDataset,
    q: usize,
    attack: &IterativeConfig,
    seed: u64,
) -> Result<AblationReport> {
    if models.len() < 2 {
        return Err(invalid("the ablation needs at least two models"));
    }
    let targets = random_targets(eval.labels(), eval.num_classes(), seed::derive_seed(seed, "ablation"))?;
    let mut cells = Vec::new();
    let mut white_box = Vec::new();
    let mut hits = Vec::new();
    for (si, (sname, source)) in models.iter().enumerate() {
        let random = random_anchor_set(*source, anchor_set, q, seed::derive_seed(seed, &format!("random/{si}")))?;
        let screened = screened_anchor_set(*source, anchor_set, q)?;
        let losses = [
            AttackLoss::CrossEntropy,
            AttackLoss::Square { anchors: random.anchors },
            AttackLoss::Square { anchors: screened.anchors },
        ];
        let batches = losses
            .iter()
            .map(|l| iterative_attack(*source, eval, &targets, l, attack))
            .collect::<Result<Vec<_>>>()?;
        for (vi, (vname, victim)) in models.iter().enumerate() {
            let mut rates = [0.0; 3];
            let mut n = 0;
            let cell_index = if vi == si { usize::MAX } else { cells.len() };
            for (li, b) in batches.iter().enumerate() {
                let (p, t) = victim_predictions(*victim, b)?;
                rates[li] = success_rate(&p, &t)?;
                n = t.len();
                if vi != si {
                    for (j, (pp, tt)) in p.iter().zip(&t).enumerate() {
                        hits.push((cell_index, AblationLoss::ALL[li], j, pp == tt));
                    }
                }
            }
            let cell = AblationCell {
                source: sname.clone(),
                victim: vname.clone(),
                n,
                rates,
            };
            if vi == si {
                white_box.push(cell);
            } else {
                cells.push(cell);
            }
        }
    }
    Ok(AblationReport {
        q,
        cells,
        white_box,
        hits,
    })
}

// ---------------------------------------------------------------------------
// Density shift.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetAveraging {
    /// Density of the assigned target class only.
    #[default]
    Assigned,
    /// Mean density over every class.
    AllTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityShiftReport {
    pub radius: f64,
    pub n_bins: usize,
    pub averaging: TargetAveraging,
    /// Jointly max-normalised densities.
    pub clean: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub clean_counts: Vec<usize>,
    pub adversarial_counts: Vec<usize>,
    /// One-sided test that adversarial densities exceed clean ones.
    pub test: MannWhitney,
}

fn raw_density(reference: &LabeledDataset, x: &[f64], target: usize, r: f64, averaging: TargetAveraging) -> Result<f64> {
    let classes: Vec<usize> = match averaging {
        TargetAveraging::Assigned => vec![target],
        TargetAveraging::AllTargets => (0..reference.num_classes()).collect(),
    };
    let mut sum = 0.0;
    for &c in &classes {
        let q = DensityQuery::new(c, x.to_vec(), r)?;
        sum += density_value(reference, &q, DensityMode::CountOnly)?;
    }
    Ok(sum / classes.len() as f64)
}

/// Target-class ball counts of clean and adversarial images, normalised by
/// their joint maximum and binned into equal-width bins over `[0, 1]`.
pub fn density_shift_report(
    clean: &[&[f64]],
    adversarial: &[&[f64]],
    reference: &LabeledDataset,
    targets: &[usize],
    radius: f64,
    n_bins: usize,
    averaging: TargetAveraging,
) -> Result<DensityShiftReport> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid("radius must be positive and finite"));
    }
    if n_bins == 0 {
        return Err(invalid("n_bins must be positive"));
    }
    if clean.len() != adversarial.len() || clean.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} clean, adversarial and targets", clean.len()),
            actual: format!("{} adversarial, {} targets", adversarial.len(), targets.len()),
        });
    }
    let mut c = Vec::with_capacity(clean.len());
    let mut a = Vec::with_capacity(clean.len());
    for i in 0..clean.len() {
        c.push(raw_density(reference, clean[i], targets[i], radius, averaging)?);
        a.push(raw_density(reference, adversarial[i], targets[i], radius, averaging)?);
    }
    let max = c.iter().chain(&a).cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        c.iter_mut().chain(a.iter_mut()).for_each(|v| *v /= max);
    }
    let counts = |v: &[f64]| {
        let mut out = vec![0usize; n_bins];
        for x in v {
            out[bin_index(*x, n_bins)] += 1;
        }
        out
    };
    Ok(DensityShiftReport {
        radius,
        n_bins,
        averaging,
        clean_counts: counts(&c),
        adversarial_counts: counts(&a),
        test: mann_whitney_greater(&a, &c),
        clean: c,
        adversarial: a,
    })
}

/// Density shift over the attacked samples of a batch.
pub fn density_shift_from_batch(
    batch: &AdversarialBatch,
    reference: &LabeledDataset,
    radius: f64,
    n_bins: usize,
    averaging: TargetAveraging,
) -> Result<DensityShiftReport> {
    let idx = batch.attacked();
    let clean: Vec<&[f64]> = idx.iter().map(|&i| batch.original(i)).collect();
    let adv: Vec<&[f64]> = idx.iter().map(|&i| batch.adversarial(i)).collect();
    let targets: Vec<usize> = idx.iter().map(|&i| batch.targets[i]).collect();
    density_shift_report(&clean, &adv, reference, &targets, radius, n_bins, averaging)
}

/// Median Euclidean distance over all pairs of the first `max_samples` rows
/// of a seeded permutation.
pub fn median_pairwise_distance(dataset: &LabeledDataset, max_samples: usize, seed: u64) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(invalid("median distance needs at least two samples"));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    crate::dataset::shuffle(&mut idx, &mut seed::child_rng(seed, "median-distance"));
    idx.truncate(max_samples.max(2));
    let mut d = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            let s: f64 = dataset.sample(i).iter().zip(dataset.sample(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Ok(if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) })
}

// ---------------------------------------------------------------------------
// ESMA pipeline.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsmaSetup {
    /// Screening parameter.
    pub q: usize,
    pub embedding_width: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub pretrain: PretrainConfig,
    pub generator: GeneratorConfig,
    /// Augmentation for BEM-ESMA; `None` trains plain ESMA.
    pub bem: Option<AugmentationPolicy>,
}

impl Default for EsmaSetup {
    fn default() -> Self {
        Self {
            q: 2,
            embedding_width: 10,
            lambda1: 1.0,
            lambda2: 1e-3,
            pretrain: PretrainConfig::default(),
            generator: GeneratorConfig {
                learning_rate: 3e-3,
                base_width: 8,
                epochs: 10,
                ..GeneratorConfig::default()
            },
            bem: None,
        }
    }
}

pub struct TrainedAttack {
    pub anchors: AnchorSet,
    pub bank: EmbeddingBank,
    pub embedding_losses: Vec<f64>,
    pub generator: Generator,
    pub log: GeneratorTrainLog,
}

/// Screens anchors and class means on `screening`, pretrains embeddings, then
/// trains the generator on `generator_set`.
pub fn train_attack(
    surrogate: &dyn Classifier,
    screening: &LabeledDataset,
    generator_set: &LabeledDataset,
    setup: &EsmaSetup,
) -> Result<TrainedAttack> {
    setup.generator.validate()?;
    let anchors = screened_anchor_set(surrogate, screening, setup.q)?;
    let means = class_mean_features(surrogate, screening)?;
    let bank = EmbeddingBank::init(
        means,
        setup.embedding_width,
        setup.lambda1,
        setup.lambda2,
        seed::derive_seed(setup.generator.seed, "embeddings"),
    )?;
    let (bank, embedding_losses) = pretrain_embeddings(&bank, &setup.pretrain)?;
    let generator = Generator::new(&setup.generator, generator_set.shape(), &bank, surrogate.dtype())?;
    let log = match &setup.bem {
        None => train_esma(&generator, surrogate, generator_set, &anchors)?,
        Some(policy) => train_bem_esma(&generator, surrogate, generator_set, &anchors, policy)?,
    };
    Ok(TrainedAttack {
        anchors,
        bank,
        embedding_losses,
        generator,
        log,
    })
}

/// Adversarials for `images` towards `targets` from a trained attack.
pub fn run_attack(attack: &TrainedAttack, images: &LabeledDataset, targets: &[usize]) -> Result<AdversarialBatch> {
    generate_adversarial(&attack.generator, images, targets, 128)
}
