//! Class-embedding pretraining by manifold matching.
//!
//! The generator's `K` class embeddings are pulled toward the pairwise
//! geometry of the surrogate's class-mean logits: row-softmaxed Euclidean
//! distance and cosine similarity matrices of both sets are matched with a
//! symmetric KL divergence, plus a small norm penalty.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{dataset_logits, Classifier};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    pub embeddings: Vec<Vec<f64>>,
    pub class_means: Vec<Vec<f64>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatrices {
    pub euclidean: Vec<Vec<f64>>,
    pub cosine: Vec<Vec<f64>>,
}

impl EmbeddingBank {
    /// Gaussian-initialised embeddings of the given width, `N(0, 1/width)`.
    pub fn init(
        class_means: Vec<Vec<f64>>,
        width: usize,
        lambda1: f64,
        lambda2: f64,
        seed: u64,
    ) -> Result<Self> {
        if class_means.len() < 2 {
            return Err(invalid("need at least two classes"));
        }
        if width == 0 {
            return Err(invalid("embedding width must be positive"));
        }
        let mut rng = seed::child_rng(seed, "embeddings");
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("valid normal");
        let embeddings = (0..class_means.len())
            .map(|_| (0..width).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let bank = Self {
            embeddings,
            class_means,
            lambda1,
            lambda2,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn width(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.len() < 2 || self.embeddings.len() != self.class_means.len() {
            return Err(invalid("embeddings and class means must both cover K >= 2 classes"));
        }
        let w = self.width();
        if self.embeddings.iter().any(|e| e.len() != w) {
            return Err(invalid("embeddings have ragged widths"));
        }
        let finite = |v: &Vec<Vec<f64>>| v.iter().flatten().all(|x| x.is_finite());
        if !finite(&self.embeddings) || !finite(&self.class_means) {
            return Err(invalid("embedding bank contains non-finite values"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(invalid("lambda1 and lambda2 must be non-negative"));
        }
        Ok(())
    }

    pub fn embedding_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.embeddings.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.num_classes(), self.width()), device)?.to_dtype(dtype)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bank: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        bank.validate()?;
        Ok(bank)
    }
}

/// `mu_j`: mean surrogate logits of each class.
pub fn class_mean_features(model: &dyn Classifier, dataset: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    let logits = dataset_logits(model, dataset, 256)?;
    let k = dataset.num_classes();
    let width = model.num_classes();
    let mut sums = vec![vec![0.0; width]; k];
    let mut counts = vec![0usize; k];
    for (i, row) in logits.iter().enumerate() {
        let l = dataset.label(i);
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (j, (s, &c)) in sums.iter_mut().zip(&counts).enumerate() {
        if c == 0 {
            return Err(Error::EmptyClass(j));
        }
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pairwise Euclidean distances and cosine similarities. Each unordered pair
/// is computed once, so both matrices are exactly symmetric.
pub fn pairwise_matrices(vectors: &[Vec<f64>]) -> Result<PairMatrices> {
    let k = vectors.len();
    if k < 2 {
        return Err(invalid("need at least two vectors"));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroVector(i));
    }
    let mut euclidean = vec![vec![0.0; k]; k];
    let mut cosine = vec![vec![0.0; k]; k];
    for i in 0..k {
        cosine[i][i] = 1.0;
        for j in i + 1..k {
            let mut d2 = 0.0;
            let mut dot = 0.0;
            for (a, b) in vectors[i].iter().zip(&vectors[j]) {
                d2 += (a - b) * (a - b);
                dot += a * b;
            }
            let d = d2.sqrt();
            let c = dot / (norms[i] * norms[j]);
            euclidean[i][j] = d;
            euclidean[j][i] = d;
            cosine[i][j] = c;
            cosine[j][i] = c;
        }
    }
    Ok(PairMatrices { euclidean, cosine })
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// `sum_ij p_ij ln(p_ij / q_ij)` over all entries.
pub fn kl_sum(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (a, b) in pr.iter().zip(qr) {
            acc += a * (a / b).ln();
        }
    }
    acc
}

/// Manifold matching loss:
/// `KL(S_euc||E_euc) + KL(E_euc||S_euc) + l1 [KL(S_cos||E_cos) + KL(E_cos||S_cos)] + l2 sum_i ||e_i||`,
/// all matrices row-softmaxed, diagonals included.
pub fn manifold_matching_loss(bank: &EmbeddingBank) -> Result<f64> {
    let s = pairwise_matrices(&bank.class_means)?;
    let e = pairwise_matrices(&bank.embeddings)?;
    let (se, ee) = (row_softmax(&s.euclidean), row_softmax(&e.euclidean));
    let (sc, ec) = (row_softmax(&s.cosine), row_softmax(&e.cosine));
    let euc = kl_sum(&se, &ee) + kl_sum(&ee, &se);
    let cos = kl_sum(&sc, &ec) + kl_sum(&ec, &sc);
    let reg: f64 = bank.embeddings.iter().map(|v| norm(v)).sum();
    Ok(euc + bank.lambda1 * cos + bank.lambda2 * reg)
}

fn matrix_tensor(m: &[Vec<f64>], device: &Device) -> Result<Tensor> {
    let k = m.len();
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (k, k), device)?)
}

/// Differentiable form of the loss in the embeddings `e` (`K x W`, f64).
/// `target_euc` and `target_cos` are the row-softmaxed class-mean matrices.
pub fn manifold_loss_tensor(
    e: &Tensor,
    target_euc: &Tensor,
    target_cos: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> candle_core::Result<Tensor> {
    let k = e.dim(0)?;
    let eye = Tensor::eye(k, e.dtype(), e.device())?;
    let diff = e.unsqueeze(1)?.broadcast_sub(&e.unsqueeze(0)?)?;
    // sqrt(d2 + I) - I keeps the zero diagonal differentiable
    let euc = (diff.sqr()?.sum(2)? + &eye)?.sqrt()?.sub(&eye)?;
    let norms = e.sqr()?.sum_keepdim(1)?.sqrt()?;
    let unit = e.broadcast_div(&norms)?;
    let cos = unit.matmul(&unit.t()?)?;
    let sym_kl = |target: &Tensor, m: &Tensor| -> candle_core::Result<Tensor> {
        let log_e = candle_nn::ops::log_softmax(m, 1)?;
        let p_e = log_e.exp()?;
        let log_s = target.log()?;
        (target - &p_e)?.mul(&(log_s - log_e)?)?.sum_all()
    };
    let euc_term = sym_kl(target_euc, &euc)?;
    let cos_term = sym_kl(target_cos, &cos)?;
    let reg = norms.sum_all()?;
    (euc_term + (cos_term * lambda1)?)? + (reg * lambda2)?
}

fn targets(bank: &EmbeddingBank, device: &Device) -> Result<(Tensor, Tensor)> {
    let s = pairwise_matrices(&bank.class_means)?;
    Ok((
        matrix_tensor(&row_softmax(&s.euclidean), device)?,
        matrix_tensor(&row_softmax(&s.cosine), device)?,
    ))
}

/// Loss value and its gradient with respect to every embedding coordinate.
pub fn manifold_loss_gradient(bank: &EmbeddingBank) -> Result<(f64, Vec<Vec<f64>>)> {
    let device = Device::Cpu;
    let (te, tc) = targets(bank, &device)?;
    let e = Var::from_tensor(&bank.embedding_tensor(DType::F64, &device)?)?;
    let loss = manifold_loss_tensor(e.as_tensor(), &te, &tc, bank.lambda1, bank.lambda2)?;
    let grads = loss.backward()?;
    let g = grads
        .get(e.as_tensor())
        .ok_or_else(|| invalid("no gradient for embeddings"))?
        .to_vec2::<f64>()?;
    Ok((loss.to_scalar::<f64>()?, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub step_size: f64,
    pub steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            steps: 500,
        }
    }
}

/// Plain gradient descent on the manifold matching loss. Returns the trained
/// bank and the loss before each step plus the final loss.
pub fn pretrain_embeddings(
    bank: &EmbeddingBank,
    config: &PretrainConfig,
) -> Result<(EmbeddingBank, Vec<f64>)> {
    bank.validate()?;
    let mut current = bank.clone();
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let (loss, grad) = manifold_loss_gradient(&current)?;
        if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        trajectory.push(loss);
        for (e, g) in current.embeddings.iter_mut().zip(&grad) {
            for (x, d) in e.iter_mut().zip(g) {
                *x -= config.step_size * d;
            }
        }
    }
    let last = manifold_matching_loss(&current)?;
    if !last.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            loss: last,
        });
    }
    trajectory.push(last);
    Ok((current, trajectory))
}

/// Mean off-diagonal cosine similarity.
pub fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<f64> {
    let m = pairwise_matrices(vectors)?;
    let k = vectors.len();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                acc += m.cosine[i][j];
            }
        }
    }
    Ok(acc / (k * (k - 1)) as f64)
}
