//! Two-dimensional Gaussian-mixture experiments: Bayes posteriors, multi-model
//! output differences and the density / consistency / loss curves.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::density::{density_binned_statistic, density_value, local_empirical_risk, BinnedStatistic, DensityMode, DensityQuery};
use crate::error::{invalid, Result};
use crate::nn::{argmax, train_classifier, Activation, ArchSpec, Classifier, Model, TrainConfig, TrainReport, StepSchedule, OptimizerKind};
use crate::screening::per_sample_stats;
use crate::seed;
use crate::stats::{min_max_normalize, spearman};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTask {
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub weights: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            means: vec![[-1.5, 0.0], [1.5, 0.0]],
            covariances: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
            weights: vec![0.5, 0.5],
            n_samples: 200,
            seed: 0,
        }
    }
}

/// Lower Cholesky factor of a 2x2 SPD matrix.
fn cholesky(c: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let l00 = c[0][0].sqrt();
    let l10 = c[1][0] / l00;
    let l11 = (c[1][1] - l10 * l10).sqrt();
    [[l00, 0.0], [l10, l11]]
}

impl ToyTask {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k < 2 || self.covariances.len() != k || self.weights.len() != k {
            return Err(invalid("toy task needs matching means, covariances and weights for >= 2 classes"));
        }
        for c in &self.covariances {
            if c[0][1] != c[1][0] || !(c[0][0] > 0.0) || !(c[0][0] * c[1][1] - c[0][1] * c[1][0] > 0.0) {
                return Err(invalid(format!("covariance {c:?} is not symmetric positive definite")));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("mixture weights must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// `n` i.i.d. draws from the stream named `split`.
    pub fn sample(&self, n: usize, split: &str) -> Result<LabeledDataset> {
        self.validate()?;
        let mut rng = seed::child_rng(self.seed, &format!("toy/{split}"));
        let factors: Vec<_> = self.covariances.iter().map(cholesky).collect();
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.weights.len() {
                k += 1;
                acc += self.weights[k];
            }
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let l = factors[k];
            data.push(self.means[k][0] + l[0][0] * z0);
            data.push(self.means[k][1] + l[1][0] * z0 + l[1][1] * z1);
            labels.push(k);
        }
        LabeledDataset::new(vec![2], data, labels, self.num_classes())
    }

    fn log_density(&self, k: usize, p: [f64; 2]) -> f64 {
        let c = self.covariances[k];
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let (dx, dy) = (p[0] - self.means[k][0], p[1] - self.means[k][1]);
        let q = (c[1][1] * dx * dx - 2.0 * c[0][1] * dx * dy + c[0][0] * dy * dy) / det;
        -0.5 * q - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln()
    }
}

pub fn make_toy_dataset(task: &ToyTask) -> Result<LabeledDataset> {
    task.sample(task.n_samples, "train")
}

/// Evaluation grid: `points` is row-major over `ys` then `xs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Grid {
    /// `resolution x resolution` grid over the bounding box padded by `pad` of its extent.
    pub fn around(dataset: &LabeledDataset, resolution: usize, pad: f64) -> Result<Self> {
        if dataset.is_empty() || dataset.dim() != 2 || resolution < 2 {
            return Err(invalid("grid needs a non-empty 2-D dataset and resolution >= 2"));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for i in 0..dataset.len() {
            for d in 0..2 {
                lo[d] = lo[d].min(dataset.sample(i)[d]);
                hi[d] = hi[d].max(dataset.sample(i)[d]);
            }
        }
        let axis = |d: usize| -> Vec<f64> {
            let extent = (hi[d] - lo[d]).max(1e-9);
            let (a, b) = (lo[d] - pad * extent, hi[d] + pad * extent);
            (0..resolution).map(|i| a + (b - a) * i as f64 / (resolution - 1) as f64).collect()
        };
        Ok(Self { xs: axis(0), ys: axis(1) })
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.ys.iter().flat_map(|&y| self.xs.iter().map(move |&x| [x, y])).collect()
    }
}

/// Exact mixture posterior per point and the argmax decision (ties to the
/// lower class index).
pub fn bayes_posterior(task: &ToyTask, points: &[[f64; 2]]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    task.validate()?;
    let k = task.num_classes();
    let mut posts = Vec::with_capacity(points.len());
    let mut decisions = Vec::with_capacity(points.len());
    for &p in points {
        let logs: Vec<f64> = (0..k)
            .map(|j| task.weights[j].ln() + task.log_density(j, p))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let post: Vec<f64> = e.iter().map(|v| v / s).collect();
        decisions.push(argmax(&post));
        posts.push(post);
    }
    Ok((posts, decisions))
}

/// Three fully connected architectures of different sizes.
pub fn default_toy_architectures() -> Vec<ArchSpec> {
    vec![
        ArchSpec::Mlp {
            hidden: vec![8],
            activation: Activation::Tanh,
        },
        ArchSpec::Mlp {
            hidden: vec![32],
            activation: Activation::Relu,
        },
        ArchSpec::Mlp {
            hidden: vec![16, 16],
            activation: Activation::Relu,
        },
    ]
}

pub fn default_toy_training() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 300,
        schedule: StepSchedule::InverseTime { eta0: 0.1, decay: 1e-3 },
        optimizer: OptimizerKind::Sgd,
        weight_decay: 0.0,
        patience: 10,
        seed: 0,
    }
}

/// Trains one early-stopped classifier per architecture.
pub fn train_toy_models(
    dataset: &LabeledDataset,
    validation: &LabeledDataset,
    architectures: &[ArchSpec],
    config: &TrainConfig,
) -> Result<Vec<(Model, TrainReport)>> {
    if dataset.is_empty() {
        return Err(invalid("toy dataset is empty"));
    }
    architectures
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let model = Model::new(
                spec.clone(),
                dataset.shape(),
                dataset.num_classes(),
                DType::F64,
                seed::derive_seed(config.seed, &format!("toy-model/{i}")),
            )?;
            let cfg = TrainConfig {
                seed: seed::derive_seed(config.seed, &format!("toy-train/{i}")),
                ..config.clone()
            };
            let report = train_classifier(&model, dataset, Some(validation), &cfg)?;
            if report.hit_max_epochs {
                log::warn!("toy model {i} ran to max_epochs without early stopping");
            }
            Ok((model, report))
        })
        .collect()
}

fn softmax_rows(model: &dyn Classifier, points: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let mut out = Vec::with_capacity(points.len());
    let n = points.len();
    for start in (0..n).step_by(4096) {
        let end = (start + 4096).min(n);
        let x = Tensor::from_vec(flat[2 * start..2 * end].to_vec(), (end - start, 2), &Device::Cpu)?
            .to_dtype(model.dtype())?;
        let p = candle_nn::ops::softmax_last_dim(&model.logits(&x)?)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        out.extend(p);
    }
    Ok(out)
}

/// Mean over model pairs of `||p_a - p_b||_inf`, per row.
pub fn mean_pairwise_linf(outputs: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if outputs.len() < 2 {
        return Err(invalid("output difference needs at least two models"));
    }
    let n = outputs[0].len();
    let pairs = outputs.len() * (outputs.len() - 1) / 2;
    Ok((0..n)
        .map(|i| {
            let mut acc = 0.0;
            for a in 0..outputs.len() {
                for b in a + 1..outputs.len() {
                    let d = outputs[a][i]
                        .iter()
                        .zip(&outputs[b][i])
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    acc += d;
                }
            }
            acc / pairs as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub grid: Grid,
    pub posteriors: Vec<Vec<f64>>,
    pub decisions: Vec<usize>,
    /// Softmax outputs, one table per model.
    pub model_outputs: Vec<Vec<Vec<f64>>>,
    pub difference: Vec<f64>,
}

pub fn output_difference_map(task: &ToyTask, models: &[&dyn Classifier], grid: &Grid) -> Result<GridReport> {
    let points = grid.points();
    let (posteriors, decisions) = bayes_posterior(task, &points)?;
    let model_outputs = models
        .iter()
        .map(|m| softmax_rows(*m, &points))
        .collect::<Result<Vec<_>>>()?;
    let difference = mean_pairwise_linf(&model_outputs)?;
    Ok(GridReport {
        grid: grid.clone(),
        posteriors,
        decisions,
        model_outputs,
        difference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub binned: BinnedStatistic,
    /// Spearman correlation between bin index and bin mean over populated bins.
    pub spearman: Option<f64>,
}

impl Curve {
    fn new(name: &str, x_label: &str, y_label: &str, binned: BinnedStatistic) -> Self {
        let pts = binned.populated();
        let idx: Vec<f64> = pts.iter().map(|(i, _)| *i as f64).collect();
        let means: Vec<f64> = pts.iter().map(|(_, m)| *m).collect();
        let empty = binned.bins.iter().filter(|b| b.count == 0).count();
        if empty > 0 {
            log::info!("{name}: {empty} empty bins");
        }
        Self {
            name: name.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            spearman: spearman(&idx, &means),
            binned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub radius: f64,
    pub n_bins: usize,
    pub densities: Vec<f64>,
    pub output_differences: Vec<f64>,
    /// Per-sample loss and input-gradient norm, averaged over the models.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Min-max normalised loss plus min-max normalised gradient norm, rescaled to `[0, 1]`.
    pub loss_gradnorm: Vec<f64>,
    pub local_risks: Vec<f64>,
    /// Difference vs density, risk vs Loss+Gradnorm, risk vs density, density vs Loss+Gradnorm.
    pub curves: Vec<Curve>,
}

impl ConsistencyReport {
    pub fn curve(&self, name: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.name == name)
    }
}

pub const CURVE_DIFFERENCE_VS_DENSITY: &str = "difference_vs_density";
pub const CURVE_RISK_VS_LOSS_GRADNORM: &str = "risk_vs_loss_gradnorm";
pub const CURVE_RISK_VS_DENSITY: &str = "risk_vs_density";
pub const CURVE_DENSITY_VS_LOSS_GRADNORM: &str = "density_vs_loss_gradnorm";

/// Per-sample density (own class, radius `r`), model disagreement, loss and
/// gradient norm, and local empirical risk, binned into the four curves.
pub fn consistency_report(
    models: &[&dyn Classifier],
    dataset: &LabeledDataset,
    r: f64,
    n_bins: usize,
) -> Result<ConsistencyReport> {
    if models.len() < 2 {
        return Err(invalid("consistency report needs at least two models"));
    }
    let n = dataset.len();
    let mut densities = Vec::with_capacity(n);
    for i in 0..n {
        let q = DensityQuery::new(dataset.label(i), dataset.sample(i).to_vec(), r)?;
        densities.push(density_value(dataset, &q, DensityMode::Volume)?);
    }
    let points: Vec<[f64; 2]> = if dataset.dim() == 2 {
        (0..n).map(|i| [dataset.sample(i)[0], dataset.sample(i)[1]]).collect()
    } else {
        return Err(invalid("consistency report expects 2-D samples"));
    };
    let outputs = models
        .iter()
        .map(|m| softmax_rows(*m, &points))
        .collect::<Result<Vec<_>>>()?;
    let output_differences = mean_pairwise_linf(&outputs)?;

    let mut losses = vec![0.0; n];
    let mut grad_norms = vec![0.0; n];
    for m in models {
        for s in per_sample_stats(*m, dataset, 256)? {
            losses[s.sample_index] += s.loss / models.len() as f64;
            grad_norms[s.sample_index] += s.grad_norm / models.len() as f64;
        }
    }
    let summed: Vec<f64> = min_max_normalize(&losses)
        .iter()
        .zip(min_max_normalize(&grad_norms))
        .map(|(a, b)| a + b)
        .collect();
    let loss_gradnorm = min_max_normalize(&summed);

    let mut local_risks = Vec::with_capacity(n);
    for i in 0..n {
        let q = DensityQuery::new(dataset.label(i), dataset.sample(i).to_vec(), r)?;
        local_risks.push(local_empirical_risk(&losses, dataset, &q)?.mean_loss);
    }

    let curves = vec![
        Curve::new(
            CURVE_DIFFERENCE_VS_DENSITY,
            "density bin",
            "mean pairwise output difference",
            density_binned_statistic(&output_differences, &densities, n_bins)?,
        ),
        Curve::new(
            CURVE_RISK_VS_LOSS_GRADNORM,
            "Loss+Gradnorm bin",
            "local empirical risk",
            density_binned_statistic(&local_risks, &loss_gradnorm, n_bins)?,
        ),
        Curve::new(
            CURVE_RISK_VS_DENSITY,
            "density bin",
            "local empirical risk",
            density_binned_statistic(&local_risks, &densities, n_bins)?,
        ),
        Curve::new(
            CURVE_DENSITY_VS_LOSS_GRADNORM,
            "Loss+Gradnorm bin",
            "local sample density",
            density_binned_statistic(&densities, &loss_gradnorm, n_bins)?,
        ),
    ];
    Ok(ConsistencyReport {
        radius: r,
        n_bins,
        densities,
        output_differences,
        losses,
        grad_norms,
        loss_gradnorm,
        local_risks,
        curves,
    })
}

/// End-to-end toy run: sample data, train the three models, build the report.
pub fn run_toy_consistency(task: &ToyTask, r: f64, n_bins: usize, training: &TrainConfig) -> Result<(ConsistencyReport, Vec<TrainReport>)> {
    let train = make_toy_dataset(task)?;
    let validation = task.sample(task.n_samples, "validation")?;
    let cfg = TrainConfig {
        seed: seed::derive_seed(task.seed, "toy-training"),
        ..training.clone()
    };
    let trained = train_toy_models(&train, &validation, &default_toy_architectures(), &cfg)?;
    let models: Vec<&dyn Classifier> = trained.iter().map(|(m, _)| m as &dyn Classifier).collect();
    let report = consistency_report(&models, &train, r, n_bins)?;
    Ok((report, trained.into_iter().map(|(_, r)| r).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_samples_give_an_empty_dataset() {
        let task = ToyTask { n_samples: 0, ..Default::default() };
        assert!(make_toy_dataset(&task).unwrap().is_empty());
    }

    #[test]
    fn invalid_tasks_are_rejected() {
        let bad_cov = ToyTask {
            covariances: vec![[[1.0, 2.0], [2.0, 1.0]]; 2],
            ..Default::default()
        };
        assert!(bad_cov.validate().is_err());
        let bad_w = ToyTask {
            weights: vec![0.7, 0.7],
            ..Default::default()
        };
        assert!(bad_w.validate().is_err());
    }

    #[test]
    fn class_proportions_and_means_concentrate() {
        let task = ToyTask {
            weights: vec![0.3, 0.7],
            covariances: vec![[[1.0, 0.3], [0.3, 0.5]], [[2.0, 0.0], [0.0, 1.0]]],
            ..Default::default()
        };
        let n = 10_000;
        let ds = task.sample(n, "check").unwrap();
        let counts = ds.class_counts();
        for k in 0..2 {
            let p = task.weights[k];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[k] as f64 / n as f64 - p).abs() < 3.0 * sigma);
            for d in 0..2 {
                let idx = ds.class_indices(k);
                let mean = idx.iter().map(|&i| ds.sample(i)[d]).sum::<f64>() / idx.len() as f64;
                let sd = (task.covariances[k][d][d] / idx.len() as f64).sqrt();
                assert!((mean - task.means[k][d]).abs() < 3.0 * sd);
            }
        }
    }

    #[test]
    fn posterior_symmetry_and_confidence() {
        let task = ToyTask::default();
        let (p, d) = bayes_posterior(&task, &[[0.0, 0.0], [0.0, 5.0]]).unwrap();
        assert!((p[0][0] - 0.5).abs() < 1e-12 && (p[1][1] - 0.5).abs() < 1e-12);
        assert_eq!(d, vec![0, 0]);
        let far = ToyTask {
            means: vec![[-10.0, 0.0], [10.0, 0.0]],
            ..Default::default()
        };
        let (p, _) = bayes_posterior(&far, &[[-10.0, 0.0]]).unwrap();
        assert!((p[0][0] - 1.0).abs() < 1e-6);
        for row in bayes_posterior(&task, &[[0.3, -1.0], [4.0, 2.0]]).unwrap().0 {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linf_difference_closed_forms() {
        let p = vec![vec![0.2, 0.8]; 3];
        let q = vec![vec![0.5, 0.5]; 3];
        assert_eq!(mean_pairwise_linf(&[p.clone(), p.clone()]).unwrap(), vec![0.0; 3]);
        let d = mean_pairwise_linf(&[p.clone(), q.clone()]).unwrap();
        assert!(d.iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert_eq!(
            mean_pairwise_linf(&[p.clone(), q.clone()]).unwrap(),
            mean_pairwise_linf(&[q, p]).unwrap()
        );
    }

    #[test]
    fn grid_covers_padded_bounding_box() {
        let ds = LabeledDataset::new(vec![2], vec![0.0, 0.0, 1.0, 2.0], vec![0, 1], 2).unwrap();
        let g = Grid::around(&ds, 200, 0.2).unwrap();
        assert_eq!(g.points().len(), 40_000);
        assert!((g.xs[0] + 0.2).abs() < 1e-12 && (g.xs[199] - 1.2).abs() < 1e-12);
        assert!((g.ys[0] + 0.4).abs() < 1e-12 && (g.ys[199] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn whole_dataset_radius_degenerates() {
        let task = ToyTask::default();
        let ds = make_toy_dataset(&task).unwrap();
        let a = Model::new(default_toy_architectures()[0].clone(), &[2], 2, DType::F64, 1).unwrap();
        let b = Model::new(default_toy_architectures()[1].clone(), &[2], 2, DType::F64, 2).unwrap();
        // equal class sizes are needed for every density to coincide
        let idx: Vec<usize> = {
            let c0 = ds.class_indices(0);
            let c1 = ds.class_indices(1);
            let m = c0.len().min(c1.len());
            c0[..m].iter().chain(&c1[..m]).copied().collect()
        };
        let balanced = ds.subset(&idx);
        let rep = consistency_report(&[&a, &b], &balanced, 1e3, 10).unwrap();
        assert!(rep.curve(CURVE_DIFFERENCE_VS_DENSITY).unwrap().binned.degenerate);
        assert!(rep.curve(CURVE_RISK_VS_DENSITY).unwrap().binned.degenerate);
    }

    #[test]
    fn architectures_differ_in_size() {
        let counts: Vec<usize> = default_toy_architectures()
            .into_iter()
            .map(|s| Model::new(s, &[2], 2, DType::F64, 0).unwrap().parameter_count())
            .collect();
        assert!(counts[0] != counts[1] && counts[1] != counts[2] && counts[0] != counts[2]);
    }
}
