//! Erasure and tampering sweeps over message lengths.
//!
//! Each enterprise owns one HiDDeN-like model (one noise regime each) and a
//! message pool. The same covers are watermarked by every enterprise; a
//! surrogate learns to tell the enterprises apart and the attack is trained on
//! that surrogate. Every test image from enterprise `s` is pushed towards a
//! random enterprise `t != s`.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::cache::ArtifactCache;
use super::{random_targets, run_attack, victim_predictions, success_rate, EsmaSetup};
use crate::dataset::{smooth_covers, LabeledDataset};
use crate::error::{invalid, Result};
use crate::generator::GeneratorConfig;
use crate::nn::{accuracy, ArchSpec, OptimizerKind, StepSchedule, TrainConfig};
use crate::seed;
use crate::watermark::{
    build_message_pools, encode_dataset, gaussian_baseline, mean_psnr, HiddenConfig, HiddenLike, MessagePool,
    NoiseCalibration, NoiseRegime, WatermarkMessage, WatermarkModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatermarkScenario {
    /// One message per enterprise.
    Exp1,
    /// Pools of several messages, a subset in active use.
    Exp2,
    /// Mixed watermark architectures; only the HiDDeN-like model is built in.
    Exp3Lite,
}

/// Watermark architectures named by the mixed-architecture scenario that have
/// no built-in implementation.
pub const EXTERNAL_WATERMARK_MODELS: [&str; 2] = ["stable_signature", "fed"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GaussianMatch {
    /// Same mean PSNR as the attack.
    Psnr,
    /// Same mean perturbation L2 norm as the attack.
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkSweepConfig {
    pub lengths: Vec<usize>,
    /// One enterprise per entry.
    pub regimes: Vec<NoiseRegime>,
    pub pool_size: usize,
    pub active_messages: usize,
    pub image_size: usize,
    pub hidden_covers: usize,
    pub hidden_validation: usize,
    /// Covers watermarked by every enterprise for surrogate and attack training.
    pub attack_covers: usize,
    pub test_covers: usize,
    /// Template; message length, regime and seed are set per model.
    pub hidden: HiddenConfig,
    pub surrogate: ArchSpec,
    pub surrogate_training: TrainConfig,
    pub esma: EsmaSetup,
    pub gaussian: GaussianMatch,
    pub seed: u64,
}

impl Default for WatermarkSweepConfig {
    fn default() -> Self {
        Self {
            lengths: vec![5, 10, 15, 20, 25, 30],
            regimes: NoiseRegime::ALL.to_vec(),
            pool_size: 1,
            active_messages: 1,
            image_size: 16,
            hidden_covers: 600,
            hidden_validation: 100,
            attack_covers: 300,
            test_covers: 100,
            hidden: HiddenConfig {
                epochs: 30,
                ..HiddenConfig::default()
            },
            surrogate: ArchSpec::ResNet { width: 16, blocks: 2 },
            surrogate_training: TrainConfig {
                optimizer: OptimizerKind::AdamW,
                schedule: StepSchedule::Constant { eta: 2e-3 },
                max_epochs: 60,
                patience: 15,
                ..TrainConfig::default()
            },
            esma: EsmaSetup {
                generator: GeneratorConfig {
                    distortion_weight: 150.0,
                    output_scale: 12.0 / 255.0,
                    epochs: 20,
                    ..EsmaSetup::default().generator
                },
                ..EsmaSetup::default()
            },
            gaussian: GaussianMatch::Psnr,
            seed: 0,
        }
    }
}

impl WatermarkSweepConfig {
    /// Defaults with the pool layout of `scenario`.
    pub fn for_scenario(scenario: WatermarkScenario) -> Self {
        let mut c = Self::default();
        if scenario == WatermarkScenario::Exp2 {
            c.pool_size = 8;
            c.active_messages = 4;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.regimes.len() < 2 {
            return Err(invalid("the sweep needs at least one length and two enterprises"));
        }
        if self.pool_size == 0 || self.active_messages == 0 || self.active_messages > self.pool_size {
            return Err(invalid("need 0 < active_messages <= pool_size"));
        }
        if self.attack_covers < 4 || self.test_covers == 0 || self.hidden_covers == 0 || self.hidden_validation == 0 {
            return Err(invalid("cover counts must be positive"));
        }
        self.hidden.validate()?;
        self.esma.generator.validate()
    }
}

/// Rates for one enterprise under one attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RiskMetrics {
    pub erasure_bit: f64,
    pub erasure_det: f64,
    pub erasure_n: usize,
    pub tamper_bit: f64,
    pub tamper_det: f64,
    pub tamper_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnterpriseCell {
    pub length: usize,
    pub enterprise: usize,
    pub regime: NoiseRegime,
    pub hidden_bit_accuracy: f64,
    pub hidden_psnr: f64,
    pub hidden_below_target: bool,
    /// Cover against watermarked test image.
    pub watermark_psnr: f64,
    pub esma: RiskMetrics,
    pub gaussian: RiskMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub length: usize,
    pub surrogate_accuracy: f64,
    pub white_box_success: f64,
    pub attack_psnr: f64,
    pub gaussian_psnr: f64,
    pub gaussian_sigma: f64,
    pub gaussian_reached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Risk {
    Erasure,
    Tampering,
}

/// One decoded test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSample {
    pub length: usize,
    pub enterprise: usize,
    pub method: String,
    pub risk: Risk,
    pub index: usize,
    /// Normalised Hamming distance behind the bit metric.
    pub bit: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSweepReport {
    pub scenario: WatermarkScenario,
    pub cells: Vec<EnterpriseCell>,
    pub lengths: Vec<LengthSummary>,
    pub samples: Vec<WatermarkSample>,
}

impl WatermarkSweepReport {
    pub fn cell(&self, length: usize, regime: NoiseRegime) -> Option<&EnterpriseCell> {
        self.cells.iter().find(|c| c.length == length && c.regime == regime)
    }

    /// Mean over enterprises of the ESMA tamper detection rate at each length.
    pub fn mean_tamper_det(&self) -> Vec<(usize, f64)> {
        self.lengths
            .iter()
            .map(|l| {
                let v: Vec<f64> = self.cells.iter().filter(|c| c.length == l.length).map(|c| c.esma.tamper_det).collect();
                (l.length, v.iter().sum::<f64>() / v.len().max(1) as f64)
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>3} {:<9} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "L", "regime", "bitacc", "era-det", "era-bit", "tam-det", "tam-bit", "g-era", "g-tam"
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{:>3} {:<9} {:>6.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}\n",
                c.length,
                c.regime.tag(),
                c.hidden_bit_accuracy,
                c.esma.erasure_det,
                c.esma.erasure_bit,
                c.esma.tamper_det,
                c.esma.tamper_bit,
                c.gaussian.erasure_det,
                c.gaussian.tamper_det
            ));
        }
        for l in &self.lengths {
            out.push_str(&format!(
                "L={:<3} surrogate {:.3} white-box {:.3} attack PSNR {:.2} dB gaussian PSNR {:.2} dB (sigma {:.4})\n",
                l.length, l.surrogate_accuracy, l.white_box_success, l.attack_psnr, l.gaussian_psnr, l.gaussian_sigma
            ));
        }
        out
    }
}

fn decode_rows(model: &dyn WatermarkModel, rows: &[&[f64]], shape: &[usize]) -> Result<Vec<WatermarkMessage>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        let flat: Vec<f32> = chunk.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        let mut dims = vec![chunk.len()];
        dims.extend_from_slice(shape);
        out.extend(model.decode(&Tensor::from_vec(flat, dims, &Device::Cpu)?)?);
    }
    Ok(out)
}

struct Scorer<'a> {
    models: &'a [HiddenLike],
    pools: &'a [MessagePool],
    shape: &'a [usize],
    /// Clean decodes of every test row by its own enterprise.
    reference: &'a [WatermarkMessage],
    labels: &'a [usize],
}

impl Scorer<'_> {
    /// Erasure on rows from `e`; tampering on rows `tamper_rows` decoded by `e`.
    fn score<'r>(
        &self,
        e: usize,
        rows: &dyn Fn(usize) -> &'r [f64],
        tamper_rows: &[usize],
        method: &str,
        length: usize,
        samples: &mut Vec<WatermarkSample>,
    ) -> Result<RiskMetrics> {
        let own: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == e).collect();
        let own_rows: Vec<&[f64]> = own.iter().map(|&i| rows(i)).collect();
        let decoded = decode_rows(&self.models[e], &own_rows, self.shape)?;
        let mut m = RiskMetrics {
            erasure_n: own.len(),
            tamper_n: tamper_rows.len(),
            ..Default::default()
        };
        for (j, &i) in own.iter().enumerate() {
            let bit = self.reference[i].hamming(&decoded[j]) as f64 / length as f64;
            let detected = self.reference[i] != decoded[j];
            m.erasure_bit += bit;
            m.erasure_det += f64::from(u8::from(detected));
            samples.push(WatermarkSample {
                length,
                enterprise: e,
                method: method.into(),
                risk: Risk::Erasure,
                index: i,
                bit,
                detected,
            });
        }
        let t_rows: Vec<&[f64]> = tamper_rows.iter().map(|&i| rows(i)).collect();
        let decoded = decode_rows(&self.models[e], &t_rows, self.shape)?;
        let pool = &self.pools[e];
        for (j, &i) in tamper_rows.iter().enumerate() {
            let bit = pool.messages.iter().map(|p| p.hamming(&decoded[j])).min().unwrap_or(0) as f64 / length as f64;
            let detected = pool.contains(&decoded[j]);
            m.tamper_bit += bit;
            m.tamper_det += f64::from(u8::from(detected));
            samples.push(WatermarkSample {
                length,
                enterprise: e,
                method: method.into(),
                risk: Risk::Tampering,
                index: i,
                bit,
                detected,
            });
        }
        if m.erasure_n > 0 {
            m.erasure_bit /= m.erasure_n as f64;
            m.erasure_det /= m.erasure_n as f64;
        }
        if m.tamper_n > 0 {
            m.tamper_bit /= m.tamper_n as f64;
            m.tamper_det /= m.tamper_n as f64;
        }
        Ok(m)
    }
}

/// Runs the sweep; `progress` receives one line per finished stage.
pub fn run_watermark_sweep(
    scenario: WatermarkScenario,
    config: &WatermarkSweepConfig,
    cache: &ArtifactCache,
    progress: &mut dyn FnMut(&str),
) -> Result<WatermarkSweepReport> {
    config.validate()?;
    let n_e = config.regimes.len();
    let size = config.image_size;
    let root = config.seed;
    let hidden_train = smooth_covers(config.hidden_covers, 3, size, seed::derive_seed(root, "covers/hidden"))?;
    let hidden_val = smooth_covers(config.hidden_validation, 3, size, seed::derive_seed(root, "covers/hidden-val"))?;
    let attack_covers = smooth_covers(config.attack_covers, 3, size, seed::derive_seed(root, "covers/attack"))?;
    let test_covers = smooth_covers(config.test_covers, 3, size, seed::derive_seed(root, "covers/test"))?;
    let shape = test_covers.shape().to_vec();
    let dim = test_covers.dim();

    let mut report = WatermarkSweepReport {
        scenario,
        cells: Vec::new(),
        lengths: Vec::new(),
        samples: Vec::new(),
    };
    for &length in &config.lengths {
        let pools = build_message_pools(
            n_e,
            config.pool_size,
            length,
            config.active_messages,
            seed::derive_seed(root, &format!("pools/{length}")),
        )?;
        let mut models = Vec::with_capacity(n_e);
        let mut hidden_reports = Vec::with_capacity(n_e);
        for (e, &regime) in config.regimes.iter().enumerate() {
            let hc = HiddenConfig {
                message_length: length,
                regime,
                seed: seed::derive_seed(root, &format!("hidden/{e}/{length}")),
                ..config.hidden.clone()
            };
            let (m, r) = cache.hidden(&hc, &hidden_train, &hidden_val)?;
            progress(&format!(
                "L={length} enterprise {e} ({}) bit accuracy {:.3}, PSNR {:.2} dB",
                regime.tag(),
                r.validation_bit_accuracy,
                r.validation_psnr
            ));
            models.push(m);
            hidden_reports.push(r);
        }

        let mut train_all = LabeledDataset::empty(shape.clone(), n_e);
        let mut test_all = LabeledDataset::empty(shape.clone(), n_e);
        let mut watermark_psnr = Vec::with_capacity(n_e);
        for (e, m) in models.iter().enumerate() {
            let active = pools[e].active_messages();
            let (tr, _) = encode_dataset(m, &attack_covers, &active, e, n_e)?;
            let (te, _) = encode_dataset(m, &test_covers, &active, e, n_e)?;
            watermark_psnr.push(mean_psnr(test_covers.data(), te.data(), dim)?);
            train_all = train_all.concat(&tr)?;
            test_all = test_all.concat(&te)?;
        }
        let reference: Vec<WatermarkMessage> = {
            let mut out = Vec::with_capacity(test_all.len());
            for e in 0..n_e {
                let idx = test_all.class_indices(e);
                let rows: Vec<&[f64]> = idx.iter().map(|&i| test_all.sample(i)).collect();
                out.extend(decode_rows(&models[e], &rows, &shape)?);
            }
            out
        };

        let (fit, val) = train_all.split(0.85, seed::derive_seed(root, &format!("surrogate-split/{length}")));
        let surrogate_seed = seed::derive_seed(root, &format!("surrogate/{length}"));
        let training = TrainConfig {
            seed: surrogate_seed,
            ..config.surrogate_training.clone()
        };
        let (surrogate, _) = cache.classifier(&config.surrogate, n_e, &fit, Some(&val), &training, surrogate_seed)?;
        let surrogate_accuracy = accuracy(&surrogate, &test_all)?;
        let surrogate_key = ArtifactCache::classifier_key(&config.surrogate, n_e, &fit, Some(&val), &training, surrogate_seed);
        let setup = EsmaSetup {
            generator: GeneratorConfig {
                seed: seed::derive_seed(root, &format!("generator/{length}")),
                ..config.esma.generator.clone()
            },
            ..config.esma.clone()
        };
        let attack = cache.attack(&surrogate_key, &surrogate, &train_all, &train_all, &setup)?;
        let targets = random_targets(test_all.labels(), n_e, seed::derive_seed(root, &format!("targets/{length}")))?;
        let batch = run_attack(&attack, &test_all, &targets)?;
        let (p, t) = victim_predictions(&surrogate, &batch)?;
        let white_box_success = success_rate(&p, &t)?;
        let attack_psnr = mean_psnr(&batch.originals, &batch.adversarials, dim)?;
        let target_norm = batch
            .originals
            .chunks(dim)
            .zip(batch.adversarials.chunks(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .sum::<f64>()
            / batch.len() as f64;
        let calibration = match config.gaussian {
            GaussianMatch::Psnr => NoiseCalibration::Psnr { target_db: attack_psnr },
            GaussianMatch::Norm => NoiseCalibration::NormMatched { target_norm },
        };
        let noise = gaussian_baseline(test_all.data(), dim, calibration, seed::derive_seed(root, &format!("gaussian/{length}")))?;
        progress(&format!(
            "L={length} surrogate accuracy {surrogate_accuracy:.3}, white-box {white_box_success:.3}, attack PSNR {attack_psnr:.2} dB"
        ));

        let scorer = Scorer {
            models: &models,
            pools: &pools,
            shape: &shape,
            reference: &reference,
            labels: test_all.labels(),
        };
        for e in 0..n_e {
            let towards: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == e).collect();
            let others: Vec<usize> = (0..test_all.len()).filter(|&i| test_all.label(i) != e).collect();
            let esma = scorer.score(e, &|i| batch.adversarial(i), &towards, "esma", length, &mut report.samples)?;
            let gaussian = scorer.score(
                e,
                &|i| &noise.images[i * dim..(i + 1) * dim],
                &others,
                "gaussian",
                length,
                &mut report.samples,
            )?;
            report.cells.push(EnterpriseCell {
                length,
                enterprise: e,
                regime: config.regimes[e],
                hidden_bit_accuracy: hidden_reports[e].validation_bit_accuracy,
                hidden_psnr: hidden_reports[e].validation_psnr,
                hidden_below_target: hidden_reports[e].below_target,
                watermark_psnr: watermark_psnr[e],
                esma,
                gaussian,
            });
        }
        report.lengths.push(LengthSummary {
            length,
            surrogate_accuracy,
            white_box_success,
            attack_psnr,
            gaussian_psnr: noise.achieved_psnr,
            gaussian_sigma: noise.sigma,
            gaussian_reached: noise.reached,
        });
    }
    Ok(report)
}
