//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance run. Each is written from the definition, without reusing
//! library helpers.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use esma_core::dataset::LabeledDataset;
use esma_core::density::{ball_volume, density_binned_statistic, local_empirical_risk, local_sample_density, DensityQuery};
use esma_core::embeddings::pairwise_matrices;
use esma_core::watermark::{
    distortion_loss, erasure_bit_error_rate, erasure_detection_rate, psnr, tamper_bit_metric, tamper_detection_rate, MessagePool,
    TamperMode, WatermarkMessage, MAX_MESSAGE_LENGTH, MIN_MESSAGE_LENGTH,
};

pub const INSTANCES: usize = 200;
pub const ORACLE_TOL: f64 = 1e-12;

/// Worst discrepancy of one family over all instances.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub family: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl OracleResult {
    pub fn ok(&self) -> bool {
        self.max_error < ORACLE_TOL
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn random_dataset(rng: &mut ChaCha8Rng) -> LabeledDataset {
    let n = rng.random_range(1..40);
    let d = rng.random_range(1..6);
    let k = rng.random_range(1..4);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    LabeledDataset::new(vec![d], data, labels, k).unwrap()
}

/// `V_d(r)` by the two-step recurrence `V_d = 2 pi r^2 / d * V_{d-2}`.
pub fn volume_oracle(d: usize, r: f64) -> f64 {
    let mut v = if d % 2 == 0 { 1.0 } else { 2.0 * r };
    let mut k = if d % 2 == 0 { 2 } else { 3 };
    while k <= d {
        v *= 2.0 * std::f64::consts::PI * r * r / k as f64;
        k += 2;
    }
    v
}

fn members_oracle(ds: &LabeledDataset, class: usize, center: &[f64], r: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..ds.len() {
        if ds.labels()[i] != class {
            continue;
        }
        let row = &ds.data()[i * ds.dim()..(i + 1) * ds.dim()];
        let d2: f64 = row.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
        if d2.sqrt() <= r {
            out.push(i);
        }
    }
    out
}

pub fn density_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let ds = random_dataset(&mut rng);
        let class = rng.random_range(0..ds.num_classes());
        let center: Vec<f64> = (0..ds.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(0.05..1.5);
        let est = local_sample_density(&ds, &DensityQuery::new(class, center.clone(), r).unwrap()).unwrap();
        let count = members_oracle(&ds, class, &center, r).len();
        let vol = volume_oracle(ds.dim(), r);
        if est.count_in_ball != count {
            worst = f64::INFINITY;
        }
        worst = worst.max(rel(est.ball_volume, vol)).max(rel(est.density, count as f64 / vol));
        worst = worst.max(rel(ball_volume(ds.dim(), r).unwrap(), vol));
    }
    OracleResult {
        family: "density",
        instances: INSTANCES,
        max_error: worst,
    }
}

pub fn local_risk_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < INSTANCES {
        let ds = random_dataset(&mut rng);
        let losses: Vec<f64> = (0..ds.len()).map(|_| rng.random_range(0.0..5.0)).collect();
        let i0 = rng.random_range(0..ds.len());
        let class = ds.labels()[i0];
        let center = ds.data()[i0 * ds.dim()..(i0 + 1) * ds.dim()].to_vec();
        let r = rng.random_range(0.05..1.5);
        let members = members_oracle(&ds, class, &center, r);
        let got = local_empirical_risk(&losses, &ds, &DensityQuery::new(class, center, r).unwrap()).unwrap();
        let expected = members.iter().map(|&i| losses[i]).sum::<f64>() / members.len() as f64;
        if got.neighborhood_indices != members {
            worst = f64::INFINITY;
        }
        worst = worst.max(rel(got.mean_loss, expected));
        checked += 1;
    }
    OracleResult {
        family: "local_risk",
        instances: INSTANCES,
        max_error: worst,
    }
}

pub fn binning_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..60);
        let n_bins = rng.random_range(2..12);
        let scale = if rng.random_bool(0.5) { 1.0 } else { 37.0 };
        let dens: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) * scale).collect();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = density_binned_statistic(&vals, &dens, n_bins).unwrap();
        let max = dens.iter().cloned().fold(0.0, f64::max);
        let norm: Vec<f64> = dens.iter().map(|d| if max > 1.0 { d / max } else { *d }).collect();
        for b in 0..n_bins {
            let lo = b as f64 / n_bins as f64;
            let hi = (b + 1) as f64 / n_bins as f64;
            let last = b + 1 == n_bins;
            // Membership by multiplication rather than division.
            let inside: Vec<f64> = (0..n)
                .filter(|&i| {
                    let t = norm[i] * n_bins as f64;
                    t >= b as f64 && (t < (b + 1) as f64 || last)
                })
                .map(|i| vals[i])
                .collect();
            let bin = &got.bins[b];
            if bin.count != inside.len() || rel(bin.lower, lo) > 0.0 || rel(bin.upper, hi) > 0.0 {
                worst = f64::INFINITY;
            }
            match bin.mean {
                Some(m) => worst = worst.max(rel(m, inside.iter().sum::<f64>() / inside.len() as f64)),
                None if inside.is_empty() => {}
                None => worst = f64::INFINITY,
            }
        }
    }
    OracleResult {
        family: "binning",
        instances: INSTANCES,
        max_error: worst,
    }
}

pub fn pairwise_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let k = rng.random_range(2..8);
        let w = rng.random_range(1..7);
        let v: Vec<Vec<f64>> = (0..k).map(|_| (0..w).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let m = pairwise_matrices(&v).unwrap();
        for i in 0..k {
            for j in 0..k {
                let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let c = if i == j { 1.0 } else { dot(&v[i], &v[j]) / (dot(&v[i], &v[i]).sqrt() * dot(&v[j], &v[j]).sqrt()) };
                worst = worst.max(rel(m.euclidean[i][j], d)).max(rel(m.cosine[i][j], c));
            }
        }
    }
    OracleResult {
        family: "pairwise_matrices",
        instances: INSTANCES,
        max_error: worst,
    }
}

fn bits_of(m: &WatermarkMessage) -> u64 {
    m.bits().iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
}

fn popcount_distance(a: &WatermarkMessage, b: &WatermarkMessage) -> u32 {
    (bits_of(a) ^ bits_of(b)).count_ones()
}

pub fn watermark_metric_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let len = rng.random_range(MIN_MESSAGE_LENGTH..=MAX_MESSAGE_LENGTH.min(64));
        let n = rng.random_range(1..30);
        let msg = |rng: &mut ChaCha8Rng| WatermarkMessage::new((0..len).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let encoded: Vec<WatermarkMessage> = (0..n).map(|_| msg(&mut rng)).collect();
        // Attacked decodes flip a few bits, sometimes none.
        let attacked: Vec<WatermarkMessage> = encoded
            .iter()
            .map(|m| {
                let bits = m.bits().iter().map(|&b| if rng.random_bool(0.1) { 1 - b } else { b }).collect();
                WatermarkMessage::new(bits).unwrap()
            })
            .collect();
        let pool = MessagePool {
            enterprise: 0,
            messages: (0..rng.random_range(1..5)).map(|_| msg(&mut rng)).chain(attacked.iter().take(2).cloned()).collect(),
            active: vec![0],
        };
        let era_bit: f64 = encoded.iter().zip(&attacked).map(|(a, b)| popcount_distance(a, b) as f64 / len as f64).sum::<f64>() / n as f64;
        let era_det = encoded.iter().zip(&attacked).filter(|(a, b)| popcount_distance(a, b) > 0).count() as f64 / n as f64;
        let closest: f64 = attacked
            .iter()
            .map(|d| pool.messages.iter().map(|m| popcount_distance(m, d)).min().unwrap() as f64 / len as f64)
            .sum::<f64>()
            / n as f64;
        let farthest: f64 = attacked
            .iter()
            .map(|d| pool.messages.iter().map(|m| popcount_distance(m, d)).max().unwrap() as f64 / len as f64)
            .sum::<f64>()
            / n as f64;
        let tam_det = attacked.iter().filter(|d| pool.messages.iter().any(|m| popcount_distance(m, d) == 0)).count() as f64 / n as f64;
        worst = worst
            .max(rel(erasure_bit_error_rate(&encoded, &attacked).unwrap(), era_bit))
            .max(rel(erasure_detection_rate(&encoded, &attacked).unwrap(), era_det))
            .max(rel(tamper_bit_metric(&attacked, &pool, TamperMode::Closest).unwrap(), closest))
            .max(rel(tamper_bit_metric(&attacked, &pool, TamperMode::AsPrinted).unwrap(), farthest))
            .max(rel(tamper_detection_rate(&attacked, &pool).unwrap(), tam_det));
    }
    OracleResult {
        family: "watermark_metrics",
        instances: INSTANCES,
        max_error: worst,
    }
}

pub fn psnr_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..300);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| (x + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0)).collect();
        let peak: f64 = if rng.random_bool(0.5) { 1.0 } else { 255.0 };
        let sse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let expected = 20.0 * peak.log10() - 10.0 * (sse / n as f64).log10();
        worst = worst.max(rel(psnr(&a, &b, peak).unwrap(), expected));
    }
    OracleResult {
        family: "psnr",
        instances: INSTANCES,
        max_error: worst,
    }
}

pub fn distortion_oracle(seed: u64) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..9));
        let a: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut norm2 = 0.0;
        for i in 0..a.len() {
            norm2 += (a[i] - b[i]).powi(2);
        }
        worst = worst.max(rel(distortion_loss(&a, &b).unwrap(), norm2 / (c * h * w) as f64));
    }
    OracleResult {
        family: "distortion",
        instances: INSTANCES,
        max_error: worst,
    }
}

pub fn all_oracles(seed: u64) -> Vec<OracleResult> {
    vec![
        density_oracle(seed),
        local_risk_oracle(seed + 1),
        binning_oracle(seed + 2),
        pairwise_oracle(seed + 3),
        watermark_metric_oracle(seed + 4),
        psnr_oracle(seed + 5),
        distortion_oracle(seed + 6),
    ]
}

// ---------------------------------------------------------------------------
// Finite differences.

use candle_core::{DType, Device, Tensor, Var};
use esma_core::embeddings::{manifold_loss_gradient, manifold_matching_loss, EmbeddingBank};
use esma_core::generator::{easy_match_loss, easy_match_loss_tensor, group_weights};
use esma_core::nn::{Activation, ArchSpec, Classifier, Model};

pub const FD_POINTS: usize = 5;
pub const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||g_fd - g|| / ||g||` using central differences of `f` around `x`.
fn fd_relative_error(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut fd = vec![0.0; x.len()];
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + FD_STEP;
        let up = f(&p);
        p[i] = x[i] - FD_STEP;
        let down = f(&p);
        p[i] = x[i];
        fd[i] = (up - down) / (2.0 * FD_STEP);
    }
    let diff: Vec<f64> = fd.iter().zip(grad).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(grad).max(1e-12)
}

/// Relative gradient error of the manifold loss at `FD_POINTS` random banks.
pub fn manifold_fd_errors(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..FD_POINTS)
        .map(|p| {
            let k = rng.random_range(3..7);
            let means: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let bank = EmbeddingBank::init(means, rng.random_range(2..8), 1.0, 1e-3, seed + p as u64).unwrap();
            let (_, g) = manifold_loss_gradient(&bank).unwrap();
            let w = bank.width();
            let x: Vec<f64> = bank.embeddings.iter().flatten().copied().collect();
            fd_relative_error(&x, &g.concat(), |flat| {
                let mut b = bank.clone();
                b.embeddings = flat.chunks(w).map(<[f64]>::to_vec).collect();
                manifold_matching_loss(&b).unwrap()
            })
        })
        .collect()
}

/// Relative error of the autograd gradient of the easy-sample matching loss
/// with respect to the inputs of a small f64 MLP, at `FD_POINTS` batches.
pub fn easy_match_fd_errors(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d, n) = (4, 6, 8);
    let spec = ArchSpec::Mlp {
        hidden: vec![12],
        activation: Activation::Tanh,
    };
    let model = Model::new(spec, &[d], k, DType::F64, seed).unwrap();
    let device = Device::Cpu;
    let logits = |x: &[f64]| -> Vec<Vec<f64>> {
        let t = Tensor::from_vec(x.to_vec(), (n, d), &device).unwrap();
        model.logits(&t).unwrap().to_vec2::<f64>().unwrap()
    };
    let mut out = Vec::new();
    while out.len() < FD_POINTS {
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sources: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let Ok(weights) = group_weights(&sources, &targets) else { continue };
        let anchors: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // Keep away from the smooth-L1 kink so the difference quotient is valid.
        let z = logits(&x);
        let near_kink = z
            .iter()
            .zip(&anchors)
            .any(|(zr, ar)| zr.iter().zip(ar).any(|(a, b)| ((a - b).abs() - 1.0).abs() < 1e-3));
        if near_kink {
            continue;
        }
        let xv = Var::from_tensor(&Tensor::from_vec(x.clone(), (n, d), &device).unwrap()).unwrap();
        let a = Tensor::from_vec(anchors.concat(), (n, k), &device).unwrap();
        let w = Tensor::from_vec(weights, n, &device).unwrap();
        let loss = easy_match_loss_tensor(&model.logits(xv.as_tensor()).unwrap(), &a, &w).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        out.push(fd_relative_error(&x, &g, |p| easy_match_loss(&logits(p), &anchors, &sources, &targets).unwrap()));
    }
    out
}

// ---------------------------------------------------------------------------
// BEM with zeta fixed at one against plain ESMA.

use esma_core::generator::{train_bem_esma, train_esma, AugmentationPolicy, Generator, GeneratorConfig, ZetaMode};
use esma_core::screening::AnchorSet;

pub const BEM_STEPS: usize = 10;

/// Per-step losses of ESMA and of BEM-ESMA with `zeta = value`, from the same
/// initialisation, seeds and batches.
pub fn esma_vs_bem_losses(zeta: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let k = 3;
    let shape = [3usize, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 48;
    let data: Vec<f64> = (0..n * 192).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let ds = LabeledDataset::new(shape.to_vec(), data, labels, k).unwrap();
    let surrogate = Model::new(
        ArchSpec::ConvNet {
            widths: vec![4],
            kernel: 3,
        },
        &shape,
        k,
        DType::F32,
        seed,
    )
    .unwrap();
    let members: Vec<Vec<usize>> = (0..k).map(|c| vec![c, c + k]).collect();
    let member_features: Vec<Vec<Vec<f64>>> = members
        .iter()
        .map(|m| {
            let x = ds.features(m, DType::F32, &Device::Cpu).unwrap();
            surrogate.logits(&x).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
        })
        .collect();
    let anchors = member_features
        .iter()
        .map(|rows| (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect())
        .collect();
    let set = AnchorSet {
        q: 1,
        effective_q: vec![1; k],
        members,
        member_features,
        anchors,
    };
    let bank = EmbeddingBank::init((0..k).map(|c| (0..k).map(|j| if c == j { 2.0 } else { 0.1 }).collect()).collect(), 4, 1.0, 1e-3, seed)
        .unwrap();
    let config = GeneratorConfig {
        base_width: 4,
        levels: 2,
        batch_size: 8,
        epochs: 5,
        max_steps: Some(BEM_STEPS),
        learning_rate: 1e-3,
        zeta: ZetaMode::Fixed { value: zeta },
        seed,
        ..GeneratorConfig::default()
    };
    let plain = Generator::new(&config, &shape, &bank, DType::F32).unwrap();
    let mixed = Generator::new(&config, &shape, &bank, DType::F32).unwrap();
    let a = train_esma(&plain, &surrogate, &ds, &set).unwrap().losses;
    let b = train_bem_esma(&mixed, &surrogate, &ds, &set, &AugmentationPolicy::default()).unwrap().losses;
    (a, b)
}
