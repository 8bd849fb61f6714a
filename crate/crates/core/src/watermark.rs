//! Watermark messages and pools, a small HiDDeN-style encoder/decoder with
//! trainable noise layers, and the erasure / tampering risk metrics.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{shuffle, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::nn::seeded_init;
use crate::ops::{upsample2, Conv};
use crate::seed;

pub const MIN_MESSAGE_LENGTH: usize = 5;
pub const MAX_MESSAGE_LENGTH: usize = 64;

const MESSAGE_PLANES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WatermarkMessage {
    bits: Vec<u8>,
}

impl WatermarkMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if !(MIN_MESSAGE_LENGTH..=MAX_MESSAGE_LENGTH).contains(&bits.len()) {
            return Err(invalid(format!(
                "message length {} outside [{MIN_MESSAGE_LENGTH}, {MAX_MESSAGE_LENGTH}]",
                bits.len()
            )));
        }
        if bits.iter().any(|b| *b > 1) {
            return Err(invalid("message bits must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    /// Low `len` bits of `value`, most significant first.
    pub fn from_u64(value: u64, len: usize) -> Result<Self> {
        Self::new((0..len).rev().map(|i| ((value >> i) & 1) as u8).collect())
    }

    pub fn random<R: Rng>(len: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..len).map(|_| rng.random_range(0..2u8)).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn hamming(&self, other: &Self) -> usize {
        assert_eq!(self.len(), other.len(), "hamming distance needs equal lengths");
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }
}

impl fmt::Display for WatermarkMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for WatermarkMessage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(invalid(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }
}

impl TryFrom<String> for WatermarkMessage {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WatermarkMessage> for String {
    fn from(m: WatermarkMessage) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessagePool {
    pub enterprise: usize,
    pub messages: Vec<WatermarkMessage>,
    /// Indices into `messages` used for encoding.
    pub active: Vec<usize>,
}

impl MessagePool {
    pub fn contains(&self, m: &WatermarkMessage) -> bool {
        self.messages.contains(m)
    }

    pub fn active_messages(&self) -> Vec<&WatermarkMessage> {
        self.active.iter().map(|&i| &self.messages[i]).collect()
    }

    pub fn message_length(&self) -> usize {
        self.messages[0].len()
    }
}

/// Disjoint pools of `n_p` distinct uniform messages, `n_active` of each
/// chosen for encoding.
pub fn build_message_pools(
    n_enterprises: usize,
    n_p: usize,
    length: usize,
    n_active: usize,
    seed: u64,
) -> Result<Vec<MessagePool>> {
    if n_enterprises == 0 || n_p == 0 {
        return Err(invalid("need at least one enterprise and one message per pool"));
    }
    if n_active == 0 || n_active > n_p {
        return Err(invalid(format!("active subset size {n_active} must be in [1, {n_p}]")));
    }
    if !(MIN_MESSAGE_LENGTH..=MAX_MESSAGE_LENGTH).contains(&length) {
        return Err(invalid(format!("message length {length} out of range")));
    }
    let requested = (n_enterprises as u128) * (n_p as u128);
    if requested > 1u128 << length {
        return Err(Error::CapacityExceeded { requested, bits: length });
    }
    let mut rng = seed::child_rng(seed, "message-pools");
    let mask = if length == 64 { u64::MAX } else { (1u64 << length) - 1 };
    let mut seen = HashSet::new();
    let mut values = Vec::with_capacity(requested as usize);
    while values.len() < requested as usize {
        let v = rng.random::<u64>() & mask;
        if seen.insert(v) {
            values.push(v);
        }
    }
    values
        .chunks(n_p)
        .enumerate()
        .map(|(e, chunk)| {
            let messages = chunk
                .iter()
                .map(|&v| WatermarkMessage::from_u64(v, length))
                .collect::<Result<Vec<_>>>()?;
            let mut idx: Vec<usize> = (0..n_p).collect();
            shuffle(&mut idx, &mut rng);
            let mut active = idx[..n_active].to_vec();
            active.sort_unstable();
            Ok(MessagePool { enterprise: e, messages, active })
        })
        .collect()
}

/// One `enterprise <id> active <i,j,..>` header per pool followed by its bitstrings.
pub fn pools_to_text(pools: &[MessagePool]) -> String {
    let mut out = String::new();
    for p in pools {
        let active: Vec<String> = p.active.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("enterprise {} active {}\n", p.enterprise, active.join(",")));
        for m in &p.messages {
            out.push_str(&format!("{m}\n"));
        }
    }
    out
}

pub fn pools_from_text(text: &str) -> Result<Vec<MessagePool>> {
    let mut pools: Vec<MessagePool> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("enterprise ") {
            let mut parts = rest.split_whitespace();
            let id = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| invalid(format!("line {}: bad enterprise id", lineno + 1)))?;
            let active = match (parts.next(), parts.next()) {
                (Some("active"), Some(list)) => list
                    .split(',')
                    .map(|s| s.parse().map_err(|_| invalid(format!("line {}: bad active index", lineno + 1))))
                    .collect::<Result<Vec<usize>>>()?,
                _ => return Err(invalid(format!("line {}: missing active list", lineno + 1))),
            };
            pools.push(MessagePool { enterprise: id, messages: Vec::new(), active });
        } else {
            let pool = pools
                .last_mut()
                .ok_or_else(|| invalid("message before any enterprise header"))?;
            pool.messages.push(line.parse()?);
        }
    }
    for p in &pools {
        if p.messages.is_empty() || p.active.iter().any(|&i| i >= p.messages.len()) {
            return Err(invalid(format!("pool of enterprise {} is empty or has bad active indices", p.enterprise)));
        }
    }
    Ok(pools)
}

// ---------------------------------------------------------------------------
// Risk metrics on decoded messages.

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a} decoded messages"),
            actual: format!("{b} decoded messages"),
        });
    }
    Ok(())
}

/// Mean normalised Hamming distance between the decode of each encoded image
/// and the decode of its attacked version.
pub fn erasure_bit_error_rate(encoded: &[WatermarkMessage], attacked: &[WatermarkMessage]) -> Result<f64> {
    check_aligned(encoded.len(), attacked.len())?;
    if encoded.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = encoded
        .iter()
        .zip(attacked)
        .map(|(a, b)| a.hamming(b) as f64 / a.len() as f64)
        .sum();
    Ok(sum / encoded.len() as f64)
}

/// Fraction of images whose attacked decode differs from the encoded decode.
pub fn erasure_detection_rate(encoded: &[WatermarkMessage], attacked: &[WatermarkMessage]) -> Result<f64> {
    check_aligned(encoded.len(), attacked.len())?;
    if encoded.is_empty() {
        return Ok(0.0);
    }
    let changed = encoded.iter().zip(attacked).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / encoded.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TamperMode {
    /// Distance to the nearest pool message.
    #[default]
    Closest,
    /// Distance to the farthest pool message.
    AsPrinted,
}

/// Mean normalised Hamming distance between each decode and the pool, under `mode`.
pub fn tamper_bit_metric(decoded: &[WatermarkMessage], pool: &MessagePool, mode: TamperMode) -> Result<f64> {
    if pool.messages.is_empty() {
        return Err(invalid("tamper metric needs a non-empty pool"));
    }
    if decoded.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for d in decoded {
        let dists = pool.messages.iter().map(|m| m.hamming(d));
        let pick = match mode {
            TamperMode::Closest => dists.min(),
            TamperMode::AsPrinted => dists.max(),
        };
        sum += pick.unwrap_or(0) as f64 / d.len() as f64;
    }
    Ok(sum / decoded.len() as f64)
}

/// Fraction of decodes that exactly equal some pool message.
pub fn tamper_detection_rate(decoded: &[WatermarkMessage], pool: &MessagePool) -> Result<f64> {
    if pool.messages.is_empty() {
        return Err(invalid("tamper detection needs a non-empty pool"));
    }
    if decoded.is_empty() {
        return Ok(0.0);
    }
    let hits = decoded.iter().filter(|d| pool.contains(d)).count();
    Ok(hits as f64 / decoded.len() as f64)
}

// ---------------------------------------------------------------------------
// Image quality.

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    check_aligned(a.len(), b.len())?;
    if a.is_empty() {
        return Err(invalid("psnr of empty images"));
    }
    let mse = distortion_loss(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Squared Euclidean distance divided by the element count.
pub fn distortion_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    check_aligned(a.len(), b.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    Ok(s / a.len() as f64)
}

/// Mean of per-image PSNR over rows of length `dim`; infinite values are skipped.
pub fn mean_psnr(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    check_aligned(a.len(), b.len())?;
    if dim == 0 || a.len() % dim != 0 || a.is_empty() {
        return Err(invalid("mean_psnr needs whole images"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.chunks(dim).zip(b.chunks(dim)) {
        let p = psnr(x, y, 1.0)?;
        if p.is_finite() {
            sum += p;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::INFINITY } else { sum / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseCalibration {
    /// Match the mean per-image PSNR.
    Psnr { target_db: f64 },
    /// Match the mean per-image L2 norm of the (clamped) perturbation.
    NormMatched { target_norm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBaseline {
    pub images: Vec<f64>,
    pub sigma: f64,
    pub achieved_psnr: f64,
    pub mean_norm: f64,
    /// Calibration target reached within tolerance (0.5 dB, or 1% of the norm).
    pub reached: bool,
}

const SIGMA_MAX: f64 = 4.0;

/// I.i.d. Gaussian noise with one `sigma` for every pixel, found by bisection
/// on a fixed noise draw, then clamped to `[0, 1]`.
pub fn gaussian_baseline(images: &[f64], dim: usize, calibration: NoiseCalibration, seed: u64) -> Result<GaussianBaseline> {
    if dim == 0 || images.is_empty() || images.len() % dim != 0 {
        return Err(invalid("gaussian baseline needs whole images"));
    }
    let mut rng = seed::child_rng(seed, "gaussian-baseline");
    let z: Vec<f64> = (0..images.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let apply = |sigma: f64| -> Vec<f64> {
        images
            .iter()
            .zip(&z)
            .map(|(x, n)| (x + sigma * n).clamp(0.0, 1.0))
            .collect()
    };
    let norm = |noisy: &[f64]| -> f64 {
        let rows = images.len() / dim;
        images
            .chunks(dim)
            .zip(noisy.chunks(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .sum::<f64>()
            / rows as f64
    };
    // `distance` grows with sigma for a fixed draw; the target is a distance too.
    let (target, distance): (f64, Box<dyn Fn(&[f64]) -> Result<f64>>) = match calibration {
        NoiseCalibration::Psnr { target_db } => {
            if !target_db.is_finite() {
                return Err(invalid("target PSNR must be finite"));
            }
            (-target_db, Box::new(|noisy: &[f64]| Ok(-mean_psnr(images, noisy, dim)?)))
        }
        NoiseCalibration::NormMatched { target_norm } => {
            if !(target_norm >= 0.0) || !target_norm.is_finite() {
                return Err(invalid("target norm must be finite and non-negative"));
            }
            (target_norm, Box::new(|noisy: &[f64]| Ok(norm(noisy))))
        }
    };
    let (mut lo, mut hi) = (0.0, SIGMA_MAX);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if distance(&apply(mid))? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let noisy = apply(sigma);
    let achieved_psnr = mean_psnr(images, &noisy, dim)?;
    let mean_norm = norm(&noisy);
    let reached = match calibration {
        NoiseCalibration::Psnr { target_db } => (achieved_psnr - target_db).abs() <= 0.5,
        NoiseCalibration::NormMatched { target_norm } => (mean_norm - target_norm).abs() <= 0.01 * target_norm.max(1e-12),
    };
    if !reached {
        log::warn!("gaussian baseline missed its target: psnr {achieved_psnr:.2} dB, norm {mean_norm:.4}");
    }
    Ok(GaussianBaseline {
        images: noisy,
        sigma,
        achieved_psnr,
        mean_norm,
        reached,
    })
}

// ---------------------------------------------------------------------------
// Noise layers.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRegime {
    Nonoise,
    Crop,
    Jpeg,
    Combined,
}

impl NoiseRegime {
    pub const ALL: [NoiseRegime; 4] = [NoiseRegime::Nonoise, NoiseRegime::Crop, NoiseRegime::Jpeg, NoiseRegime::Combined];

    pub fn tag(self) -> &'static str {
        match self {
            NoiseRegime::Nonoise => "nonoise",
            NoiseRegime::Crop => "crop",
            NoiseRegime::Jpeg => "jpeg",
            NoiseRegime::Combined => "combined",
        }
    }
}

impl FromStr for NoiseRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseRegime::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| invalid(format!("unknown noise regime {s:?}")))
    }
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_TABLE: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

/// Standard IJG scaling of a base quantisation table.
pub fn quality_table(base: &[f64; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, b) in out.iter_mut().zip(base) {
        *o = ((b * scale + 50.0) / 100.0).floor().max(1.0);
    }
    out
}

/// Orthonormal 8-point DCT-II matrix, `D[k][n]`.
pub fn dct_matrix() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (k, row) in d.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    d
}

/// `round(x) + (x - round(x))^3`: the forward value stays close to rounding
/// while the gradient is non-zero.
pub fn soft_round(x: &Tensor) -> candle_core::Result<Tensor> {
    let r = x.detach().round()?;
    &r + (x - &r)?.powf(3.0)?
}

/// `M^T X M` for every trailing 8x8 block `X`, given `m_right = M`.
fn block_transform(x: &Tensor, m_right: &Tensor) -> candle_core::Result<Tensor> {
    let dims = x.dims().to_vec();
    let rows = x.elem_count() / 8;
    let right = |t: &Tensor| -> candle_core::Result<Tensor> {
        t.contiguous()?.reshape((rows, 8))?.matmul(m_right)?.reshape(dims.as_slice())
    };
    let last = dims.len() - 1;
    right(&right(x)?.transpose(last - 1, last)?)?.transpose(last - 1, last)
}

/// Differentiable JPEG approximation on `(N, C, H, W)` images in `[0, 1]`
/// with `H`, `W` multiples of 8. Three-channel input goes through YCbCr.
pub fn jpeg_approx(x: &Tensor, quality: u32) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 8 != 0 || w % 8 != 0 {
        candle_core::bail!("jpeg approximation needs sides divisible by 8, got {h}x{w}");
    }
    let device = x.device();
    let dtype = x.dtype();
    let pixels = (x * 255.0)?;
    let planes = if c == 3 {
        let (r, g, b) = (pixels.narrow(1, 0, 1)?, pixels.narrow(1, 1, 1)?, pixels.narrow(1, 2, 1)?);
        let y = ((&r * 0.299)? + (&g * 0.587)? + (&b * 0.114)?)?;
        let cb = ((&r * -0.168736)? + (&g * -0.331264)? + (&b * 0.5)?)?;
        let cr = ((&r * 0.5)? + (&g * -0.418688)? + (&b * -0.081312)?)?;
        Tensor::cat(&[(y - 128.0)?, cb, cr], 1)?
    } else {
        (pixels - 128.0)?
    };
    let d: Vec<f64> = dct_matrix().iter().flatten().copied().collect();
    let d = Tensor::from_vec(d, (8, 8), device)?.to_dtype(dtype)?;
    let dt = d.t()?.contiguous()?;
    let blocks = planes
        .reshape((n, c, h / 8, 8, w / 8, 8))?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?;
    let coeffs = block_transform(&blocks, &dt)?;
    let luma = quality_table(&LUMA_TABLE, quality);
    let chroma = quality_table(&CHROMA_TABLE, quality);
    let tables: Vec<f64> = (0..c)
        .flat_map(|ch| if c == 3 && ch > 0 { chroma } else { luma })
        .collect();
    let q = Tensor::from_vec(tables, (1, c, 1, 1, 8, 8), device)?.to_dtype(dtype)?;
    let quantised = soft_round(&coeffs.broadcast_div(&q)?)?.broadcast_mul(&q)?;
    let restored = block_transform(&quantised, &d)?
        .permute((0, 1, 2, 4, 3, 5))?
        .contiguous()?
        .reshape((n, c, h, w))?;
    let rgb = if c == 3 {
        let y = (restored.narrow(1, 0, 1)? + 128.0)?;
        let cb = restored.narrow(1, 1, 1)?;
        let cr = restored.narrow(1, 2, 1)?;
        let r = (&y + (&cr * 1.402)?)?;
        let g = ((&y - (&cb * 0.344136)?)? - (&cr * 0.714136)?)?;
        let b = (&y + (&cb * 1.772)?)?;
        Tensor::cat(&[r, g, b], 1)?
    } else {
        (restored + 128.0)?
    };
    (rgb / 255.0)?.clamp(0.0, 1.0)
}

/// Random square crop keeping about `keep_area` of the image, one position
/// per batch, resized back to the input size by nearest-neighbour sampling.
pub fn random_crop<R: Rng>(x: &Tensor, keep_area: f64, rng: &mut R) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let side = |s: usize| ((s as f64 * keep_area.sqrt()).round() as usize).clamp(1, s);
    let (ch, cw) = (side(h), side(w));
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let pick = |offset: usize, kept: usize, full: usize| -> candle_core::Result<Tensor> {
        let idx: Vec<u32> = (0..full).map(|i| (offset + i * kept / full) as u32).collect();
        Tensor::new(idx, x.device())
    };
    x.contiguous()?
        .index_select(&pick(top, ch, h)?, 2)?
        .index_select(&pick(left, cw, w)?, 3)
}

// ---------------------------------------------------------------------------
// HiDDeN-style model.

/// Pluggable encoder/decoder pair.
pub trait WatermarkModel {
    fn message_length(&self) -> usize;
    /// Encodes one message per cover; output stays in `[0, 1]`.
    fn encode(&self, covers: &Tensor, messages: &[WatermarkMessage]) -> Result<Tensor>;
    /// Hard bits: decoder probability `>= 0.5` gives 1.
    fn decode(&self, images: &Tensor) -> Result<Vec<WatermarkMessage>>;
    fn tag(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenConfig {
    pub message_length: usize,
    pub regime: NoiseRegime,
    pub width: usize,
    pub encoder_blocks: usize,
    /// Bound on the per-pixel residual, `strength * tanh(.)`.
    pub strength: f64,
    pub image_weight: f64,
    /// Fraction of training run on the message loss alone.
    pub image_warmup: f64,
    pub message_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop_keep_area: f64,
    pub jpeg_quality: u32,
    pub target_bit_accuracy: f64,
    pub seed: u64,
}

impl Default for HiddenConfig {
    fn default() -> Self {
        Self {
            message_length: 30,
            regime: NoiseRegime::Nonoise,
            width: 16,
            encoder_blocks: 2,
            strength: 0.04,
            image_weight: 0.7,
            image_warmup: 0.5,
            message_weight: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            crop_keep_area: 0.7,
            jpeg_quality: 75,
            target_bit_accuracy: 0.95,
            seed: 0,
        }
    }
}

impl HiddenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_MESSAGE_LENGTH..=MAX_MESSAGE_LENGTH).contains(&self.message_length) {
            return Err(invalid(format!("message length {} out of range", self.message_length)));
        }
        if self.width == 0 || self.encoder_blocks == 0 || self.batch_size == 0 {
            return Err(invalid("width, block counts and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.image_warmup) {
            return Err(invalid("image_warmup must be a fraction in [0, 1]"));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(invalid("strength must be in (0, 1]"));
        }
        if !(self.crop_keep_area > 0.0 && self.crop_keep_area <= 1.0) {
            return Err(invalid("crop_keep_area must be in (0, 1]"));
        }
        if !(self.learning_rate > 0.0) || self.image_weight < 0.0 || self.message_weight <= 0.0 {
            return Err(invalid("learning rate and message weight must be positive, image weight non-negative"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

struct Encoder {
    /// Signed bits to a coarse `(planes, H/4, W/4)` message map.
    message: Linear,
    stem: Conv,
    body: Vec<Conv>,
    out: Conv,
}

struct Decoder {
    stem: Conv,
    /// Stride-2 stages; the last one ends at `H/4 x W/4`.
    down: Vec<Conv>,
    head: Linear,
}

pub struct HiddenLike {
    config: HiddenConfig,
    input_shape: Vec<usize>,
    dtype: DType,
    varmap: VarMap,
    encoder: Encoder,
    decoder: Decoder,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrainReport {
    pub losses: Vec<f64>,
    pub validation_bit_accuracy: f64,
    pub validation_psnr: f64,
    /// Validation bit accuracy stayed below the configured target.
    pub below_target: bool,
}

/// Mean of `softplus(z) - y z`, computed without overflow.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    (softplus - (logits * targets)?)?.mean_all()
}

fn message_tensor(messages: &[WatermarkMessage], dtype: DType) -> Result<Tensor> {
    let l = messages.first().map(|m| m.len()).unwrap_or(0);
    if messages.iter().any(|m| m.len() != l) {
        return Err(invalid("messages differ in length"));
    }
    let v: Vec<f32> = messages.iter().flat_map(|m| m.bits().iter().map(|&b| b as f32)).collect();
    Ok(Tensor::from_vec(v, (messages.len(), l), &Device::Cpu)?.to_dtype(dtype)?)
}

impl HiddenLike {
    pub fn new(config: &HiddenConfig, input_shape: &[usize], dtype: DType) -> Result<Self> {
        config.validate()?;
        if input_shape.len() != 3 {
            return Err(invalid("watermark covers must be (C, H, W)"));
        }
        let needs_blocks = matches!(config.regime, NoiseRegime::Jpeg | NoiseRegime::Combined);
        if needs_blocks && (input_shape[1] % 8 != 0 || input_shape[2] % 8 != 0) {
            return Err(invalid("jpeg regimes need image sides divisible by 8"));
        }
        if input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0 {
            return Err(invalid("watermark covers need sides divisible by 4"));
        }
        let (c, gh, gw) = (input_shape[0], input_shape[1] / 4, input_shape[2] / 4);
        let (w, l, k) = (config.width, config.message_length, MESSAGE_PLANES);
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &Device::Cpu);
        let mut body = Vec::new();
        for i in 0..config.encoder_blocks {
            let cin = if i == 0 { w + k } else { w };
            body.push(Conv::new(cin, w, 3, 1, vb.pp(format!("enc{i}")))?);
        }
        let encoder = Encoder {
            message: linear(l, k * gh * gw, vb.pp("enc_message"))?,
            stem: Conv::new(c, w, 3, 1, vb.pp("enc_stem"))?,
            body,
            out: Conv::new(w, c, 1, 1, vb.pp("enc_out"))?,
        };
        let decoder = Decoder {
            stem: Conv::new(c, w, 3, 1, vb.pp("dec_stem"))?,
            down: vec![
                Conv::new(w, w, 3, 2, vb.pp("dec_down0"))?,
                Conv::new(w, w, 3, 2, vb.pp("dec_down1"))?,
            ],
            head: linear(w * gh * gw, l, vb.pp("dec_head"))?,
        };
        seeded_init(&varmap, seed::derive_seed(config.seed, "hidden"))?;
        Ok(Self {
            config: config.clone(),
            input_shape: input_shape.to_vec(),
            dtype,
            varmap,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &HiddenConfig {
        &self.config
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Unclamped residual-added image.
    fn encode_raw(&self, covers: &Tensor, bits: &Tensor) -> candle_core::Result<Tensor> {
        let (n, _, h, w) = covers.dims4()?;
        let signed = ((bits * 2.0)? - 1.0)?;
        let coarse = self
            .encoder
            .message
            .forward(&signed)?
            .reshape((n, MESSAGE_PLANES, h / 4, w / 4))?;
        let planes = upsample2(&upsample2(&coarse)?)?;
        let mut f = Tensor::cat(&[self.encoder.stem.forward(covers)?.relu()?, planes], 1)?;
        for conv in &self.encoder.body {
            f = conv.forward(&f)?.relu()?;
        }
        covers + (self.encoder.out.forward(&f)?.tanh()? * self.config.strength)?
    }

    fn encode_tensor(&self, covers: &Tensor, bits: &Tensor) -> candle_core::Result<Tensor> {
        self.encode_raw(covers, bits)?.clamp(0.0, 1.0)
    }

    /// Per-bit logits, shape `(N, L)`.
    pub fn decode_logits(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.decoder.stem.forward(images)?.relu()?;
        for conv in &self.decoder.down {
            h = conv.forward(&h)?.relu()?;
        }
        self.decoder.head.forward(&h.flatten_from(1)?)
    }

    fn noise<R: Rng>(&self, x: &Tensor, rng: &mut R) -> candle_core::Result<Tensor> {
        let crop = |x: &Tensor, rng: &mut R| random_crop(x, self.config.crop_keep_area, rng);
        match self.config.regime {
            NoiseRegime::Nonoise => Ok(x.clone()),
            NoiseRegime::Crop => crop(x, rng),
            NoiseRegime::Jpeg => jpeg_approx(x, self.config.jpeg_quality),
            NoiseRegime::Combined => {
                if rng.random_bool(0.5) {
                    crop(x, rng)
                } else {
                    jpeg_approx(x, self.config.jpeg_quality)
                }
            }
        }
    }

    /// Trains encoder and decoder end to end on random messages with the
    /// regime's noise layer in between.
    pub fn train(&self, covers: &LabeledDataset, validation: &LabeledDataset) -> Result<HiddenTrainReport> {
        if covers.shape() != self.input_shape.as_slice() || validation.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.input_shape),
                actual: format!("{:?}", covers.shape()),
            });
        }
        if covers.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cfg = &self.config;
        let mut opt = AdamW::new(
            self.varmap.all_vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut order_rng = seed::child_rng(cfg.seed, "hidden.batches");
        let mut msg_rng = seed::child_rng(cfg.seed, "hidden.messages");
        let mut noise_rng = seed::child_rng(cfg.seed, "hidden.noise");
        let mut order: Vec<usize> = (0..covers.len()).collect();
        let mut report = HiddenTrainReport::default();
        let total_steps = cfg.epochs * covers.len().div_ceil(cfg.batch_size);
        let warmup = (cfg.image_warmup * total_steps as f64).round() as usize;
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut order_rng);
            for batch in order.chunks(cfg.batch_size) {
                let x = covers.features(batch, self.dtype, &Device::Cpu)?;
                let msgs = (0..batch.len())
                    .map(|_| WatermarkMessage::random(cfg.message_length, &mut msg_rng))
                    .collect::<Result<Vec<_>>>()?;
                let bits = message_tensor(&msgs, self.dtype)?;
                let encoded = self.encode_tensor(&x, &bits)?;
                let logits = self.decode_logits(&self.noise(&encoded, &mut noise_rng)?)?;
                let image_loss = (&encoded - &x)?.sqr()?.mean_all()?;
                let message_loss = bce_with_logits(&logits, &bits)?;
                let image_weight = if report.losses.len() < warmup { 0.0 } else { cfg.image_weight };
                let loss = ((image_loss * image_weight)? + (message_loss * cfg.message_weight)?)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        step: report.losses.len(),
                        loss: value,
                    });
                }
                opt.backward_step(&loss)?;
                report.losses.push(value);
            }
        }
        let (acc, psnr) = self.validate_on(validation)?;
        report.validation_bit_accuracy = acc;
        report.validation_psnr = psnr;
        report.below_target = acc < cfg.target_bit_accuracy;
        if report.below_target {
            log::warn!(
                "{} model reached bit accuracy {acc:.3} < target {}",
                self.tag(),
                cfg.target_bit_accuracy
            );
        }
        Ok(report)
    }

    /// Clean-channel bit accuracy and mean PSNR on random messages.
    pub fn validate_on(&self, validation: &LabeledDataset) -> Result<(f64, f64)> {
        if validation.is_empty() {
            return Ok((0.0, f64::INFINITY));
        }
        let mut rng = seed::child_rng(self.config.seed, "hidden.validation");
        let msgs = (0..validation.len())
            .map(|_| WatermarkMessage::random(self.config.message_length, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let x = validation.all_features(self.dtype, &Device::Cpu)?;
        let encoded = self.encode(&x, &msgs)?;
        let decoded = self.decode(&encoded)?;
        let errors = erasure_bit_error_rate(&msgs, &decoded)?;
        let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?) };
        let psnr = mean_psnr(&flat(&x)?, &flat(&encoded)?, validation.dim())?;
        Ok((1.0 - errors, psnr))
    }

    /// Writes `hidden.safetensors` and `hidden.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.varmap.save(dir.join("hidden.safetensors"))?;
        let meta = serde_json::json!({
            "config_hash": self.config.hash(),
            "config": self.config,
            "input_shape": self.input_shape,
        });
        std::fs::write(dir.join("hidden.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let meta_path = dir.join("hidden.json");
        let weights = dir.join("hidden.safetensors");
        if !meta_path.exists() || !weights.exists() {
            return Err(Error::MissingArtifact(dir.display().to_string()));
        }
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let config: HiddenConfig = serde_json::from_value(meta["config"].clone())?;
        let shape: Vec<usize> = serde_json::from_value(meta["input_shape"].clone())?;
        let mut model = Self::new(&config, &shape, dtype)?;
        model.varmap.load(weights)?;
        Ok(model)
    }
}

impl WatermarkModel for HiddenLike {
    fn message_length(&self) -> usize {
        self.config.message_length
    }

    fn encode(&self, covers: &Tensor, messages: &[WatermarkMessage]) -> Result<Tensor> {
        if covers.dim(0)? != messages.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} messages", covers.dim(0)?),
                actual: format!("{} messages", messages.len()),
            });
        }
        if messages.iter().any(|m| m.len() != self.config.message_length) {
            return Err(invalid("message length does not match the model"));
        }
        let mut out = Vec::new();
        let n = messages.len();
        for start in (0..n).step_by(256) {
            let len = (n - start).min(256);
            let bits = message_tensor(&messages[start..start + len], self.dtype)?;
            out.push(self.encode_tensor(&covers.narrow(0, start, len)?.to_dtype(self.dtype)?, &bits)?);
        }
        if out.is_empty() {
            return Ok(covers.clone());
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    fn decode(&self, images: &Tensor) -> Result<Vec<WatermarkMessage>> {
        let n = images.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(256) {
            let len = (n - start).min(256);
            let logits = self
                .decode_logits(&images.narrow(0, start, len)?.to_dtype(self.dtype)?)?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            for row in logits {
                out.push(WatermarkMessage::new(row.iter().map(|&z| u8::from(z >= 0.0)).collect())?);
            }
        }
        Ok(out)
    }

    fn tag(&self) -> String {
        format!("hidden-{}-L{}", self.config.regime.tag(), self.config.message_length)
    }
}

/// Encodes one message per cover (cycled from `messages`) and labels every
/// row with `label`.
pub fn encode_dataset(
    model: &dyn WatermarkModel,
    covers: &LabeledDataset,
    messages: &[&WatermarkMessage],
    label: usize,
    num_classes: usize,
) -> Result<(LabeledDataset, Vec<WatermarkMessage>)> {
    if messages.is_empty() {
        return Err(invalid("no messages to encode"));
    }
    let assigned: Vec<WatermarkMessage> = (0..covers.len()).map(|i| messages[i % messages.len()].clone()).collect();
    let x = covers.all_features(DType::F32, &Device::Cpu)?;
    let encoded = model.encode(&x, &assigned)?;
    let ds = LabeledDataset::from_tensor(&encoded, vec![label; covers.len()], num_classes)?;
    Ok((ds, assigned))
}
