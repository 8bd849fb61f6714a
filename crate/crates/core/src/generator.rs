//! Conditional perturbation generator and its training losses.
//!
//! `G(x, y)` is a small Unet with residual blocks; the frozen class embedding
//! of the requested target is linearly projected and added to the features of
//! the bottleneck and every decoder level. Raw outputs go through a fixed
//! Gaussian smoothing kernel and a projection onto the `epsilon` ball around
//! the original (or, in distortion mode, only onto the image range).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{shuffle, LabeledDataset};
use crate::embeddings::EmbeddingBank;
use crate::error::{invalid, Error, Result};
use crate::nn::{restore, seeded_init, snapshot, Classifier};
use crate::ops::{upsample2, Conv};
use crate::screening::AnchorSet;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorChoice {
    /// A random member feature of the target's easy set, drawn per sample.
    RandomMember,
    /// The class anchor `a_j` (mean of member features).
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZetaMode {
    /// `zeta ~ Beta(nu, nu)` per sample.
    Beta,
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub epsilon: f64,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub nu: f64,
    pub zeta: ZetaMode,
    /// Weight of the image distortion term; positive values replace epsilon
    /// clipping by this penalty.
    pub distortion_weight: f64,
    /// `G(x, y) = x + output_scale * tanh(h)`.
    pub output_scale: f64,
    pub base_width: usize,
    pub levels: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub anchor_choice: AnchorChoice,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            kernel_size: 3,
            kernel_sigma: 1.0,
            nu: 1.0,
            zeta: ZetaMode::Beta,
            distortion_weight: 0.0,
            output_scale: 32.0 / 255.0,
            base_width: 16,
            levels: 3,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            anchor_choice: AnchorChoice::RandomMember,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(invalid("epsilon must lie in (0, 1]"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid("kernel_size must be odd"));
        }
        if !(self.kernel_sigma > 0.0) {
            return Err(invalid("kernel_sigma must be positive"));
        }
        if !(self.nu > 0.0) {
            return Err(invalid("nu must be positive"));
        }
        if let ZetaMode::Fixed { value } = self.zeta {
            if !(0.0..=1.0).contains(&value) {
                return Err(invalid("fixed zeta must lie in [0, 1]"));
            }
        }
        if !(self.distortion_weight >= 0.0) {
            return Err(invalid("distortion_weight must be non-negative"));
        }
        if !(self.output_scale > 0.0) || self.base_width == 0 || self.batch_size == 0 {
            return Err(invalid("output_scale, base_width and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    /// Epsilon clipping is active unless the distortion penalty is enabled.
    pub fn clipping(&self) -> bool {
        self.distortion_weight == 0.0
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Normalised `size x size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn reflect_indices(n: usize, pad: usize) -> Vec<u32> {
    (0..n + 2 * pad)
        .map(|i| {
            let j = i as i64 - pad as i64;
            let r = if j < 0 {
                -j
            } else if j >= n as i64 {
                2 * (n as i64 - 1) - j
            } else {
                j
            };
            r.clamp(0, n as i64 - 1) as u32
        })
        .collect()
}

fn reflect_pad(x: &Tensor, pad: usize) -> candle_core::Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let rows = Tensor::new(reflect_indices(h, pad), x.device())?;
    let cols = Tensor::new(reflect_indices(w, pad), x.device())?;
    x.index_select(&rows, 2)?.index_select(&cols, 3)
}

/// Per-channel Gaussian smoothing with reflect padding.
pub fn smooth(x: &Tensor, kernel_size: usize, sigma: f64) -> candle_core::Result<Tensor> {
    let c = x.dim(1)?;
    let k = gaussian_kernel(kernel_size, sigma);
    let weights: Vec<f64> = (0..c).flat_map(|_| k.iter().copied()).collect();
    let w = Tensor::from_vec(weights, (c, 1, kernel_size, kernel_size), x.device())?.to_dtype(x.dtype())?;
    reflect_pad(x, kernel_size / 2)?.conv2d(&w, 0, 1, 1, c)
}

/// Smooths the raw output, then projects onto `[x - eps, x + eps]` (clipping
/// mode) and onto `[0, 1]`. Differentiable through min/max.
pub fn smooth_and_clip(raw: &Tensor, original: &Tensor, config: &GeneratorConfig) -> Result<Tensor> {
    if raw.dims() != original.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", original.dims()),
            actual: format!("{:?}", raw.dims()),
        });
    }
    if raw.rank() != 4 {
        return Err(invalid("expected a (N, C, H, W) batch"));
    }
    let s = smooth(raw, config.kernel_size, config.kernel_sigma)?;
    let out = if config.clipping() {
        let lo = (original - config.epsilon)?.maximum(0.0)?;
        let hi = (original + config.epsilon)?.minimum(1.0)?;
        s.maximum(&lo)?.minimum(&hi)?
    } else {
        s.maximum(0.0)?.minimum(1.0)?
    };
    Ok(out)
}

pub fn smooth_l1(diff: &[f64]) -> f64 {
    diff.iter()
        .map(|u| {
            let a = u.abs();
            if a < 1.0 {
                0.5 * a * a
            } else {
                a - 0.5
            }
        })
        .sum()
}

/// Row-wise smooth-L1 distance, summed over coordinates: `min(u,1)^2/2 + u - min(u,1)` with `u = |d|`.
pub fn smooth_l1_rows(diff: &Tensor) -> candle_core::Result<Tensor> {
    let u = diff.abs()?;
    let m = u.minimum(1.0)?;
    ((m.sqr()? * 0.5)? + (u - m)?)?.sum(1)
}

/// `1 / |B_j|` for every kept sample of target `j`; dropped samples get 0.
pub fn group_weights(sources: &[usize], targets: &[usize]) -> Result<Vec<f64>> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for (s, t) in sources.iter().zip(targets) {
        if s != t {
            *counts.entry(*t).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(sources
        .iter()
        .zip(targets)
        .map(|(s, t)| if s == t { 0.0 } else { 1.0 / counts[t] as f64 })
        .collect())
}

/// Easy-sample matching loss: per target class, the mean smooth-L1 distance
/// between matched features and anchors, summed over classes. Samples whose
/// source equals their target are dropped.
pub fn easy_match_loss(
    features: &[Vec<f64>],
    anchors: &[Vec<f64>],
    sources: &[usize],
    targets: &[usize],
) -> Result<f64> {
    let w = group_weights(sources, targets)?;
    let mut total = 0.0;
    for i in 0..features.len() {
        if w[i] == 0.0 {
            continue;
        }
        let d: Vec<f64> = features[i].iter().zip(&anchors[i]).map(|(a, b)| a - b).collect();
        total += w[i] * smooth_l1(&d);
    }
    Ok(total)
}

/// Tensor form of [`easy_match_loss`]; `weights` from [`group_weights`].
pub fn easy_match_loss_tensor(features: &Tensor, anchors: &Tensor, weights: &Tensor) -> candle_core::Result<Tensor> {
    smooth_l1_rows(&(features - anchors)?)?.mul(weights)?.sum_all()
}

/// `zeta * u + (1 - zeta) * v`, kept inside the segment between `u` and `v`.
pub fn bem_mix(u: &[f64], v: &[f64], zeta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(invalid(format!("zeta {zeta} outside [0, 1]")));
    }
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: u.len().to_string(),
            actual: v.len().to_string(),
        });
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (zeta * a + (1.0 - zeta) * b).clamp(a.min(*b), a.max(*b)))
        .collect())
}

pub fn sample_zeta<R: Rng>(nu: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(nu, nu).map_err(|e| invalid(format!("Beta({nu}, {nu}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Per-sample augmentation producing `x^aug` for the mixup branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationPolicy {
    Identity,
    Standard {
        /// Minimum retained area fraction of the random crop.
        crop_min_area: f64,
        flip_probability: f64,
        brightness: f64,
        contrast: f64,
    },
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy::Standard {
            crop_min_area: 0.7,
            flip_probability: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor().clamp(0.0, (h - 1) as f64) as usize;
    let x0 = x.floor().clamp(0.0, (w - 1) as f64) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = ((y - y0 as f64).clamp(0.0, 1.0), (x - x0 as f64).clamp(0.0, 1.0));
    let at = |r: usize, c: usize| img[r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

impl AugmentationPolicy {
    /// Augments one `C x H x W` sample.
    pub fn apply<R: Rng>(&self, sample: &[f64], shape: &[usize], rng: &mut R) -> Vec<f64> {
        let AugmentationPolicy::Standard {
            crop_min_area,
            flip_probability,
            brightness,
            contrast,
        } = *self
        else {
            return sample.to_vec();
        };
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let side = rng.random_range(crop_min_area.min(1.0)..=1.0).sqrt();
        let (ch, cw) = (((h as f64) * side).max(1.0), ((w as f64) * side).max(1.0));
        let oy = rng.random_range(0.0..=(h as f64 - ch));
        let ox = rng.random_range(0.0..=(w as f64 - cw));
        let flip = rng.random_bool(flip_probability.clamp(0.0, 1.0));
        let b = 1.0 + rng.random_range(-brightness..=brightness);
        let k = 1.0 + rng.random_range(-contrast..=contrast);
        let mut out = vec![0.0; sample.len()];
        for ci in 0..c {
            let plane = &sample[ci * h * w..(ci + 1) * h * w];
            for r in 0..h {
                for col in 0..w {
                    let src_col = if flip { w - 1 - col } else { col };
                    let y = oy + (r as f64 + 0.5) * ch / h as f64 - 0.5;
                    let x = ox + (src_col as f64 + 0.5) * cw / w as f64 - 0.5;
                    out[ci * h * w + r * w + col] = bilinear(plane, h, w, y, x) * b;
                }
            }
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            plane.iter_mut().for_each(|v| *v = ((*v - mean) * k + mean).clamp(0.0, 1.0));
        }
        out
    }
}

struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new(ch: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            a: Conv::new(ch, ch, 3, 1, vb.pp("a"))?,
            b: Conv::new(ch, ch, 3, 1, vb.pp("b"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x + self.b.forward(&self.a.forward(x)?.relu()?)?
    }
}

struct DecoderLevel {
    up: Conv,
    proj: Linear,
    res: Option<ResBlock>,
}

/// Class-conditioned Unet generator with frozen class embeddings.
///
/// Full-resolution work is limited to the input, last decoder and output
/// convolutions; residual blocks run at the downsampled levels.
pub struct Generator {
    config: GeneratorConfig,
    input_shape: Vec<usize>,
    dtype: DType,
    varmap: VarMap,
    embeddings: Tensor,
    inc: Conv,
    encoder: Vec<(Conv, ResBlock)>,
    mid: ResBlock,
    mid_proj: Linear,
    decoder: Vec<DecoderLevel>,
    out: Conv,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("input_shape", &self.input_shape)
            .field("levels", &self.config.levels)
            .field("base_width", &self.config.base_width)
            .finish()
    }
}

impl Generator {
    pub fn new(config: &GeneratorConfig, input_shape: &[usize], bank: &EmbeddingBank, dtype: DType) -> Result<Self> {
        config.validate()?;
        bank.validate()?;
        let [c, h, w] = match input_shape {
            [c, h, w] => [*c, *h, *w],
            _ => return Err(invalid("generator input must be [C, H, W]")),
        };
        let f = 1usize << config.levels;
        if h % f != 0 || w % f != 0 {
            return Err(invalid(format!("image size {h}x{w} not divisible by 2^{}", config.levels)));
        }
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &device);
        let width = |l: usize| config.base_width << l;
        let ew = bank.width();
        let inc = Conv::new(c, width(0), 3, 1, vb.pp("inc"))?;
        let mut encoder = Vec::new();
        for l in 0..config.levels {
            let p = vb.pp(format!("enc{l}"));
            encoder.push((
                Conv::new(width(l), width(l + 1), 3, 2, p.pp("down"))?,
                ResBlock::new(width(l + 1), p.pp("res"))?,
            ));
        }
        let top = width(config.levels);
        let mid = ResBlock::new(top, vb.pp("mid"))?;
        let mid_proj = linear(ew, top, vb.pp("mid.proj"))?;
        let mut decoder = Vec::new();
        for l in (0..config.levels).rev() {
            let p = vb.pp(format!("dec{l}"));
            decoder.push(DecoderLevel {
                up: Conv::new(width(l + 1), width(l), 3, 1, p.pp("up"))?,
                proj: linear(ew, width(l), p.pp("proj"))?,
                res: if l > 0 { Some(ResBlock::new(width(l), p.pp("res"))?) } else { None },
            });
        }
        let out = Conv::new(width(0), c, 3, 1, vb.pp("out"))?;
        seeded_init(&varmap, seed::derive_seed(config.seed, "generator"))?;
        Ok(Self {
            config: config.clone(),
            input_shape: input_shape.to_vec(),
            dtype,
            varmap,
            embeddings: bank.embedding_tensor(dtype, &device)?,
            inc,
            encoder,
            mid,
            mid_proj,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.dim(0).unwrap_or(0)
    }

    /// Raw output `G(x, y)` before smoothing and clipping.
    pub fn raw(&self, x: &Tensor, targets: &[usize]) -> Result<Tensor> {
        if targets.len() != x.dim(0)? {
            return Err(Error::ShapeMismatch {
                expected: x.dim(0)?.to_string(),
                actual: targets.len().to_string(),
            });
        }
        let k = self.num_classes();
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid(format!("target {t} outside 0..{k}")));
        }
        let ids = Tensor::new(targets.iter().map(|&t| t as u32).collect::<Vec<_>>(), x.device())?;
        let e = self.embeddings.index_select(&ids, 0)?;
        let cond = |proj: &Linear, h: &Tensor| -> candle_core::Result<Tensor> {
            let (n, c) = (h.dim(0)?, h.dim(1)?);
            h.broadcast_add(&proj.forward(&e)?.reshape((n, c, 1, 1))?)
        };
        let mut h = self.inc.forward(x)?.relu()?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (down, res) in &self.encoder {
            skips.push(h.clone());
            h = res.forward(&down.forward(&h)?.relu()?)?.relu()?;
        }
        h = cond(&self.mid_proj, &self.mid.forward(&h)?.relu()?)?;
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            h = (level.up.forward(&upsample2(&h)?)?.relu()? + skip)?;
            h = cond(&level.proj, &h)?;
            if let Some(res) = &level.res {
                h = res.forward(&h)?.relu()?;
            }
        }
        let delta = self.out.forward(&h)?.tanh()?;
        Ok((x + (delta * self.config.output_scale)?)?)
    }

    /// `clip(W * G(x, y))`.
    pub fn attack(&self, x: &Tensor, targets: &[usize]) -> Result<Tensor> {
        smooth_and_clip(&self.raw(x, targets)?, x, &self.config)
    }

    /// Writes `generator.safetensors` and `generator.json` (config hash and
    /// embeddings) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.varmap.save(dir.join("generator.safetensors"))?;
        let meta = CheckpointMeta {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            input_shape: self.input_shape.clone(),
            embeddings: self.embeddings.to_dtype(DType::F64)?.to_vec2::<f64>()?,
        };
        std::fs::write(dir.join("generator.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Rebuilds a generator from a checkpoint. When `expected` is given its
    /// hash must match the stored one.
    pub fn load_checkpoint(dir: &Path, expected: Option<&GeneratorConfig>, dtype: DType) -> Result<Self> {
        let meta_path = dir.join("generator.json");
        let weights = dir.join("generator.safetensors");
        if !meta_path.exists() || !weights.exists() {
            return Err(Error::MissingArtifact(dir.display().to_string()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
        if meta.config.hash() != meta.config_hash {
            return Err(invalid("checkpoint config hash does not match its config"));
        }
        if let Some(cfg) = expected {
            if cfg.hash() != meta.config_hash {
                return Err(invalid(format!(
                    "checkpoint was trained with config {} but {} was requested",
                    meta.config_hash,
                    cfg.hash()
                )));
            }
        }
        let k = meta.embeddings.len();
        let bank = EmbeddingBank {
            embeddings: meta.embeddings.clone(),
            class_means: vec![vec![0.0]; k],
            lambda1: 0.0,
            lambda2: 0.0,
        };
        let mut g = Self::new(&meta.config, &meta.input_shape, &bank, dtype)?;
        g.varmap.load(weights)?;
        g.embeddings = bank.embedding_tensor(dtype, &Device::Cpu)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    config: GeneratorConfig,
    input_shape: Vec<usize>,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainLog {
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    /// Samples dropped because their drawn target equalled their class.
    pub dropped: usize,
    pub augmentation: Option<AugmentationPolicy>,
}

/// ESMA training: targets drawn uniformly per sample, same-class pairs
/// dropped, smooth-L1 matching to target anchors in surrogate logit space.
pub fn train_esma(
    generator: &Generator,
    surrogate: &dyn Classifier,
    dataset: &LabeledDataset,
    anchors: &AnchorSet,
) -> Result<GeneratorTrainLog> {
    train_impl(generator, surrogate, dataset, anchors, None)
}

/// BEM-ESMA: the matched feature is `zeta f(adv(x)) + (1 - zeta) f(adv(x^aug))`.
pub fn train_bem_esma(
    generator: &Generator,
    surrogate: &dyn Classifier,
    dataset: &LabeledDataset,
    anchors: &AnchorSet,
    policy: &AugmentationPolicy,
) -> Result<GeneratorTrainLog> {
    train_impl(generator, surrogate, dataset, anchors, Some(policy))
}

fn train_impl(
    generator: &Generator,
    surrogate: &dyn Classifier,
    dataset: &LabeledDataset,
    anchors: &AnchorSet,
    bem: Option<&AugmentationPolicy>,
) -> Result<GeneratorTrainLog> {
    let cfg = &generator.config;
    let k = generator.num_classes();
    if anchors.num_classes() != k || surrogate.num_classes() != k || dataset.num_classes() != k {
        return Err(invalid("generator, surrogate, anchors and dataset disagree on class count"));
    }
    if dataset.shape() != generator.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", generator.input_shape()),
            actual: format!("{:?}", dataset.shape()),
        });
    }
    let device = Device::Cpu;
    let dtype = generator.dtype;
    let mut opt = AdamW::new(
        generator.varmap.all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut batch_rng = seed::child_rng(cfg.seed, "esma.batches");
    let mut target_rng = seed::child_rng(cfg.seed, "esma.targets");
    let mut zeta_rng = seed::child_rng(cfg.seed, "esma.zeta");
    let mut aug_rng = seed::child_rng(cfg.seed, "esma.augment");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = GeneratorTrainLog {
        augmentation: bem.cloned(),
        ..Default::default()
    };
    let mut last_good = snapshot(&generator.varmap)?;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut batch_rng);
        for batch in order.chunks(cfg.batch_size) {
            if log.losses.len() >= budget {
                break 'epochs;
            }
            let sources: Vec<usize> = batch.iter().map(|&i| dataset.label(i)).collect();
            let targets: Vec<usize> = batch.iter().map(|_| target_rng.random_range(0..k)).collect();
            let anchor_rows: Vec<f64> = targets
                .iter()
                .flat_map(|&t| match cfg.anchor_choice {
                    AnchorChoice::Mean => anchors.anchor(t).to_vec(),
                    AnchorChoice::RandomMember => anchors.random_member_feature(t, &mut target_rng).to_vec(),
                })
                .collect();
            let weights = match group_weights(&sources, &targets) {
                Ok(w) => w,
                Err(Error::EmptyBatch) => {
                    log.dropped += batch.len();
                    continue;
                }
                Err(e) => return Err(e),
            };
            log.dropped += weights.iter().filter(|w| **w == 0.0).count();
            let n = batch.len();
            let x = dataset.features(batch, dtype, &device)?;
            let adv = generator.attack(&x, &targets)?;
            let mut z = surrogate.logits(&adv)?;
            if let Some(policy) = bem {
                let aug: Vec<f64> = batch
                    .iter()
                    .flat_map(|&i| policy.apply(dataset.sample(i), dataset.shape(), &mut aug_rng))
                    .collect();
                let mut shape = vec![n];
                shape.extend_from_slice(dataset.shape());
                let x_aug = Tensor::from_vec(aug, shape, &device)?.to_dtype(dtype)?;
                let z_aug = surrogate.logits(&generator.attack(&x_aug, &targets)?)?;
                let zetas: Vec<f64> = match cfg.zeta {
                    ZetaMode::Fixed { value } => vec![value; n],
                    ZetaMode::Beta => (0..n).map(|_| sample_zeta(cfg.nu, &mut zeta_rng)).collect::<Result<_>>()?,
                };
                let rest: Vec<f64> = zetas.iter().map(|v| 1.0 - v).collect();
                let zeta = Tensor::from_vec(zetas, (n, 1), &device)?.to_dtype(z.dtype())?;
                let rest = Tensor::from_vec(rest, (n, 1), &device)?.to_dtype(z.dtype())?;
                z = (z.broadcast_mul(&zeta)? + z_aug.broadcast_mul(&rest)?)?;
            }
            let a = Tensor::from_vec(anchor_rows, (n, k), &device)?.to_dtype(z.dtype())?;
            let w = Tensor::from_vec(weights, n, &device)?.to_dtype(z.dtype())?;
            let mut loss = easy_match_loss_tensor(&z, &a, &w)?;
            if !cfg.clipping() {
                let distortion = (&adv - &x)?.sqr()?.mean_all()?;
                loss = (loss + (distortion * cfg.distortion_weight)?)?;
            }
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                restore(&generator.varmap, &last_good)?;
                return Err(Error::Divergence {
                    step: log.losses.len(),
                    loss: value,
                });
            }
            opt.backward_step(&loss)?;
            log.losses.push(value);
        }
        log.epochs_run += 1;
        last_good = snapshot(&generator.varmap)?;
    }
    Ok(log)
}

/// Generated adversarials with their originals and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialBatch {
    pub shape: Vec<usize>,
    pub originals: Vec<f64>,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub adversarials: Vec<f64>,
    /// Source equals target; the adversarial is a copy of the original.
    pub skipped: Vec<bool>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn original(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.originals[i * d..(i + 1) * d]
    }

    pub fn adversarial(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.adversarials[i * d..(i + 1) * d]
    }

    /// Indices of samples that were actually attacked.
    pub fn attacked(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.skipped[i]).collect()
    }

    /// Adversarial images labelled with their targets.
    pub fn adversarial_dataset(&self, num_classes: usize) -> Result<LabeledDataset> {
        LabeledDataset::new(self.shape.clone(), self.adversarials.clone(), self.targets.clone(), num_classes)
    }
}

/// Batched inference through the full output pipeline.
pub fn generate_adversarial(
    generator: &Generator,
    images: &LabeledDataset,
    targets: &[usize],
    batch_size: usize,
) -> Result<AdversarialBatch> {
    if targets.len() != images.len() {
        return Err(Error::ShapeMismatch {
            expected: images.len().to_string(),
            actual: targets.len().to_string(),
        });
    }
    let device = Device::Cpu;
    let skipped: Vec<bool> = (0..images.len()).map(|i| images.label(i) == targets[i]).collect();
    let mut adversarials = images.data().to_vec();
    let d = images.dim();
    let todo: Vec<usize> = (0..images.len()).filter(|&i| !skipped[i]).collect();
    for chunk in todo.chunks(batch_size.max(1)) {
        let x = images.features(chunk, generator.dtype, &device)?;
        let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        let adv = generator.attack(&x, &t)?.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
        for (&i, row) in chunk.iter().zip(adv) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    fn bank(k: usize) -> EmbeddingBank {
        let means: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        EmbeddingBank::init(means, k, 1.0, 1e-3, 1).unwrap()
    }

    fn random_images(n: usize, shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        let d: usize = shape.iter().product();
        let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut s = vec![n];
        s.extend_from_slice(shape);
        Tensor::from_vec(v, s, &Device::Cpu).unwrap()
    }

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(3, 1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[8]);
        assert_eq!(k[1], k[3]);
        assert!(k[4] > k[1] && k[1] > k[0]);
    }

    #[test]
    fn reflect_indices_mirror_without_edge_repeat() {
        assert_eq!(reflect_indices(4, 1), vec![1, 0, 1, 2, 3, 2]);
        assert_eq!(reflect_indices(4, 2), vec![2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn identity_raw_output_is_unchanged_on_constant_images() {
        let x = (Tensor::ones((2, 3, 8, 8), DType::F64, &Device::Cpu).unwrap() * 0.4).unwrap();
        let out = smooth_and_clip(&x, &x, &GeneratorConfig::default()).unwrap();
        let diff = (out - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-15);
    }

    #[test]
    fn raw_equal_to_original_stays_in_ball() {
        let x = random_images(4, &[3, 8, 8], 2);
        let cfg = GeneratorConfig::default();
        let out = smooth_and_clip(&x, &x, &cfg).unwrap();
        let diff = (out - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff <= cfg.epsilon + 1e-12);
    }

    #[test]
    fn saturated_raw_output_projects_to_upper_bound() {
        let x = random_images(2, &[3, 8, 8], 3);
        let cfg = GeneratorConfig::default();
        let out = smooth_and_clip(&(&x + 1.0).unwrap(), &x, &cfg).unwrap();
        let expect = (&x + cfg.epsilon).unwrap().minimum(1.0).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn random_raw_outputs_respect_epsilon_and_range() {
        let cfg = GeneratorConfig::default();
        for s in 0..100 {
            let x = random_images(1, &[3, 6, 6], 100 + s);
            let raw = random_images(1, &[3, 6, 6], 1000 + s);
            let raw = ((raw * 3.0).unwrap() - 1.0).unwrap();
            let out = smooth_and_clip(&raw, &x, &cfg).unwrap();
            let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let o = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in v.iter().zip(&o) {
                assert!((a - b).abs() <= cfg.epsilon + 1e-6);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = random_images(1, &[3, 4, 4], 0);
        let b = random_images(2, &[3, 4, 4], 0);
        assert!(matches!(
            smooth_and_clip(&a, &b, &GeneratorConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn easy_match_closed_forms() {
        let a = vec![vec![0.5, -1.0, 2.0]];
        assert_eq!(easy_match_loss(&a, &a, &[0], &[1]).unwrap(), 0.0);
        let f = vec![vec![2.0, 0.0, 0.0]];
        let z = vec![vec![0.0, 0.0, 0.0]];
        assert_eq!(easy_match_loss(&f, &z, &[0], &[1]).unwrap(), 1.5);
        assert!(matches!(easy_match_loss(&f, &z, &[1], &[1]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn easy_match_groups_by_target() {
        let f = vec![vec![2.0], vec![0.0], vec![3.0], vec![9.0]];
        let a = vec![vec![0.0]; 4];
        // target 1 keeps {0, 1}: mean(1.5, 0) ; target 2 keeps {2}: 2.5 ; sample 3 dropped
        let l = easy_match_loss(&f, &a, &[0, 0, 0, 2], &[1, 1, 2, 2]).unwrap();
        assert_eq!(l, 0.75 + 2.5);
    }

    #[test]
    fn tensor_loss_matches_plain() {
        let mut rng = seed::rng(4);
        let f: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let a: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let s = [0, 1, 2, 3, 0, 1];
        let t = [1, 1, 2, 0, 3, 2];
        let plain = easy_match_loss(&f, &a, &s, &t).unwrap();
        let ft = Tensor::from_vec(f.concat(), (6, 4), &Device::Cpu).unwrap();
        let at = Tensor::from_vec(a.concat(), (6, 4), &Device::Cpu).unwrap();
        let w = Tensor::new(group_weights(&s, &t).unwrap(), &Device::Cpu).unwrap();
        let tl = easy_match_loss_tensor(&ft, &at, &w).unwrap().to_scalar::<f64>().unwrap();
        assert!((plain - tl).abs() < 1e-12);
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let u = [1.0, -2.0, 0.3];
        let v = [0.0, 4.0, 0.3];
        assert_eq!(bem_mix(&u, &v, 1.0).unwrap(), u.to_vec());
        assert_eq!(bem_mix(&u, &v, 0.0).unwrap(), v.to_vec());
        assert_eq!(bem_mix(&u, &v, 0.5).unwrap(), vec![0.5, 1.0, 0.3]);
        assert!(bem_mix(&u, &v, 1.5).is_err());
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = seed::rng(9);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_zeta(1.0, &mut rng).unwrap()).collect();
        assert!(stats::ks_uniform(&draws) < 0.01);
        assert!((stats::mean(&draws) - 0.5).abs() < 0.01);
    }

    #[test]
    fn beta_five_variance() {
        let mut rng = seed::rng(10);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_zeta(5.0, &mut rng).unwrap()).collect();
        let nu: f64 = 5.0;
        let expected = nu * nu / ((2.0 * nu).powi(2) * (2.0 * nu + 1.0));
        assert!((stats::variance(&draws) / expected - 1.0).abs() < 0.1);
        assert!((stats::mean(&draws) - 0.5).abs() < 0.01);
    }

    #[test]
    fn identity_augmentation_is_a_copy() {
        let mut rng = seed::rng(0);
        let s: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        assert_eq!(AugmentationPolicy::Identity.apply(&s, &[3, 4, 4], &mut rng), s);
        let aug = AugmentationPolicy::default().apply(&s, &[3, 4, 4], &mut rng);
        assert!(aug.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_output_is_deterministic_and_bounded() {
        let cfg = GeneratorConfig {
            base_width: 4,
            levels: 2,
            ..Default::default()
        };
        let g1 = Generator::new(&cfg, &[3, 8, 8], &bank(3), DType::F32).unwrap();
        let g2 = Generator::new(&cfg, &[3, 8, 8], &bank(3), DType::F32).unwrap();
        let x = random_images(5, &[3, 8, 8], 1).to_dtype(DType::F32).unwrap();
        let t = [0, 1, 2, 1, 0];
        let a = g1.attack(&x, &t).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g2.attack(&x, &t).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let o = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (p, q) in a.iter().zip(&o) {
            assert!(((p - q).abs() as f64) <= cfg.epsilon + 1e-6);
        }
        assert!(g1.raw(&x, &[0, 1, 2, 3, 0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let cfg = GeneratorConfig {
            base_width: 4,
            levels: 1,
            ..Default::default()
        };
        let g = Generator::new(&cfg, &[1, 4, 4], &bank(2), DType::F64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.save_checkpoint(dir.path()).unwrap();
        let h = Generator::load_checkpoint(dir.path(), Some(&cfg), DType::F64).unwrap();
        let x = random_images(2, &[1, 4, 4], 5);
        let a = g.attack(&x, &[0, 1]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = h.attack(&x, &[0, 1]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        let other = GeneratorConfig { seed: 7, ..cfg };
        assert!(Generator::load_checkpoint(dir.path(), Some(&other), DType::F64).is_err());
        assert!(matches!(
            Generator::load_checkpoint(&dir.path().join("nope"), None, DType::F64),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn empty_input_gives_empty_batch() {
        let cfg = GeneratorConfig {
            base_width: 4,
            levels: 1,
            ..Default::default()
        };
        let g = Generator::new(&cfg, &[1, 4, 4], &bank(2), DType::F32).unwrap();
        let ds = LabeledDataset::empty(vec![1, 4, 4], 2);
        let b = generate_adversarial(&g, &ds, &[], 8).unwrap();
        assert!(b.is_empty());
    }
}
