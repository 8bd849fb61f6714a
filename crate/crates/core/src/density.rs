//! Local sample density, ball volumes, local empirical risk and binned statistics.
//!
//! All scans are naive `O(n)` passes in ascending sample index so that results
//! are reproducible bit-for-bit against independent brute-force checks.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::LabeledDataset;
use crate::error::{invalid, Error, Result};

/// `(j, x0, r)`: class label, ball center and radius of a density query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityQuery {
    pub class_label: usize,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl DensityQuery {
    pub fn new(class_label: usize, center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(invalid(format!("radius must be positive and finite, got {radius}")));
        }
        Ok(Self {
            class_label,
            center,
            radius,
        })
    }

    fn validate(&self, dataset: &LabeledDataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(invalid(format!("radius must be positive and finite, got {}", self.radius)));
        }
        if self.class_label >= dataset.num_classes() {
            return Err(invalid(format!(
                "class {} outside the dataset's {} classes",
                self.class_label,
                dataset.num_classes()
            )));
        }
        if self.center.len() != dataset.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("center of dimension {}", dataset.dim()),
                actual: format!("dimension {}", self.center.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub count_in_ball: usize,
    pub ball_volume: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRisk {
    pub neighborhood_indices: Vec<usize>,
    pub mean_loss: f64,
}

/// Whether densities are divided by the ball volume or left as raw counts.
///
/// In image space (`d` in the thousands) the volume under- or overflows and
/// only density ratios at a fixed radius matter, so comparisons there use
/// counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    #[default]
    Volume,
    CountOnly,
}

/// `ln vol B(x0, r) = (d/2) ln pi + d ln r - ln Gamma(d/2 + 1)`.
pub fn log_ball_volume(dimension: usize, radius: f64) -> Result<f64> {
    if dimension == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid(format!("radius must be positive and finite, got {radius}")));
    }
    let d = dimension as f64;
    Ok(0.5 * d * std::f64::consts::PI.ln() + d * radius.ln() - ln_gamma(0.5 * d + 1.0))
}

/// Volume of the Euclidean `d`-ball of radius `r`, computed in log space.
pub fn ball_volume(dimension: usize, radius: f64) -> Result<f64> {
    Ok(log_ball_volume(dimension, radius)?.exp())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Ascending indices of class-`j` samples with `||x - x0|| <= r`.
pub fn ball_members(dataset: &LabeledDataset, query: &DensityQuery) -> Result<Vec<usize>> {
    query.validate(dataset)?;
    Ok((0..dataset.len())
        .filter(|&i| {
            dataset.label(i) == query.class_label
                && euclidean(dataset.sample(i), &query.center) <= query.radius
        })
        .collect())
}

pub fn local_sample_density(
    dataset: &LabeledDataset,
    query: &DensityQuery,
) -> Result<DensityEstimate> {
    let count = ball_members(dataset, query)?.len();
    let vol = ball_volume(dataset.dim(), query.radius)?;
    Ok(DensityEstimate {
        count_in_ball: count,
        ball_volume: vol,
        density: count as f64 / vol,
    })
}

/// Density under `mode`; `CountOnly` returns the raw in-ball count.
pub fn density_value(dataset: &LabeledDataset, query: &DensityQuery, mode: DensityMode) -> Result<f64> {
    match mode {
        DensityMode::Volume => Ok(local_sample_density(dataset, query)?.density),
        DensityMode::CountOnly => Ok(ball_members(dataset, query)?.len() as f64),
    }
}

/// Mean per-sample loss over the class-`j` samples inside the query ball.
pub fn local_empirical_risk(
    loss_values: &[f64],
    dataset: &LabeledDataset,
    query: &DensityQuery,
) -> Result<LocalRisk> {
    if loss_values.len() != dataset.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} losses", dataset.len()),
            actual: format!("{} losses", loss_values.len()),
        });
    }
    let members = ball_members(dataset, query)?;
    if members.is_empty() {
        return Err(Error::EmptyNeighborhood {
            class: query.class_label,
        });
    }
    let mut sum = 0.0;
    for &i in &members {
        sum += loss_values[i];
    }
    Ok(LocalRisk {
        mean_loss: sum / members.len() as f64,
        neighborhood_indices: members,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedStatistic {
    pub bins: Vec<Bin>,
    /// All densities were equal; everything sits in a single bin.
    pub degenerate: bool,
    /// Densities exceeded 1 and were divided by their maximum first.
    pub rescaled: bool,
}

impl BinnedStatistic {
    /// `(bin index, mean)` for populated bins.
    pub fn populated(&self) -> Vec<(usize, f64)> {
        self.bins
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.mean.map(|m| (i, m)))
            .collect()
    }
}

/// Bin index of a normalized value in `[0, 1]` among `n_bins` equal-width bins.
pub fn bin_index(normalized: f64, n_bins: usize) -> usize {
    ((normalized * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Groups `values` by equal-width bins of `densities` over `[0, 1]` and
/// reports per-bin counts and means.
///
/// Densities already inside `[0, 1]` are binned as given; otherwise they are
/// divided by their maximum first.
pub fn density_binned_statistic(
    values: &[f64],
    densities: &[f64],
    n_bins: usize,
) -> Result<BinnedStatistic> {
    if n_bins < 2 {
        return Err(invalid("n_bins must be at least 2"));
    }
    if values.len() != densities.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", densities.len()),
            actual: format!("{} values", values.len()),
        });
    }
    if densities.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(invalid("densities must be finite and non-negative"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("values must be finite"));
    }

    let degenerate = !densities.is_empty() && densities.iter().all(|&d| d == densities[0]);
    if degenerate {
        log::warn!("all densities equal; binned statistic collapses to one bin");
        let mut sum = 0.0;
        for v in values {
            sum += v;
        }
        return Ok(BinnedStatistic {
            bins: vec![Bin {
                lower: 0.0,
                upper: 1.0,
                count: values.len(),
                mean: Some(sum / values.len() as f64),
            }],
            degenerate: true,
            rescaled: false,
        });
    }

    let max = densities.iter().cloned().fold(0.0f64, f64::max);
    let rescaled = max > 1.0;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (v, d) in values.iter().zip(densities) {
        let norm = if rescaled { d / max } else { *d };
        let b = bin_index(norm, n_bins);
        sums[b] += v;
        counts[b] += 1;
    }
    let bins = (0..n_bins)
        .map(|b| Bin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: counts[b],
            mean: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect();
    Ok(BinnedStatistic {
        bins,
        degenerate: false,
        rescaled,
    })
}
