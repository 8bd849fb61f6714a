//! Easy sample selection: per-sample loss and input-gradient norms from an
//! early-stopped surrogate, per-class q-th-smallest thresholds, and the class
//! anchors built from the samples that pass both.

use std::path::Path;

use candle_core::{DType, Device, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{cross_entropy_per_sample, Classifier};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub sample_index: usize,
    /// Softmax cross-entropy against the true label.
    pub loss: f64,
    /// Euclidean norm of the loss gradient with respect to the flattened input.
    pub grad_norm: f64,
}

impl SampleStats {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad_norm.is_finite()
    }
}

/// Loss and input-gradient norm for every sample.
///
/// Batches are summed rather than averaged so that each gradient row is the
/// gradient of that sample's own loss (the models hold no cross-sample state).
pub fn per_sample_stats(
    model: &dyn Classifier,
    dataset: &LabeledDataset,
    batch_size: usize,
) -> Result<Vec<SampleStats>> {
    let device = Device::Cpu;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = Var::from_tensor(&dataset.features(chunk, model.dtype(), &device)?)?;
        let y = dataset.label_tensor(chunk, &device)?;
        let losses = cross_entropy_per_sample(&model.logits(x.as_tensor())?, &y)?;
        let grads = losses.sum_all()?.backward()?;
        let g = grads
            .get(x.as_tensor())
            .ok_or_else(|| invalid("no gradient reached the input"))?
            .flatten_from(1)?
            .to_dtype(DType::F64)?;
        let norms = g.sqr()?.sum(1)?.sqrt()?.to_vec1::<f64>()?;
        let losses = losses.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for (j, &i) in chunk.iter().enumerate() {
            let s = SampleStats {
                sample_index: i,
                loss: losses[j].max(0.0),
                grad_norm: norms[j],
            };
            if !s.is_finite() {
                log::warn!("sample {i} has non-finite loss or gradient; excluded from screening");
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Per-class easy-sample sets and their mean surrogate logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Requested screening parameter.
    pub q: usize,
    /// `effective_q[k] >= q`; larger when the intersection at `q` was empty.
    pub effective_q: Vec<usize>,
    /// Member sample indices `A_k`, ascending.
    pub members: Vec<Vec<usize>>,
    /// Surrogate logits of every member, aligned with `members`.
    pub member_features: Vec<Vec<Vec<f64>>>,
    /// `a_k`: mean member logits.
    pub anchors: Vec<Vec<f64>>,
}

impl AnchorSet {
    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchor(&self, k: usize) -> &[f64] {
        &self.anchors[k]
    }

    /// Logits of one uniformly chosen member of `A_k`.
    pub fn random_member_feature<R: Rng>(&self, k: usize, rng: &mut R) -> &[f64] {
        let m = &self.member_features[k];
        &m[rng.random_range(0..m.len())]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `value of rank q` (1-based) among `values`.
fn qth_smallest(values: &mut [f64], q: usize) -> f64 {
    values.sort_by(f64::total_cmp);
    values[q - 1]
}

/// The screening rule alone: for each class, samples whose loss and gradient
/// norm are both at or below the class's q-th smallest values. An empty
/// intersection raises `q` for that class until a member qualifies.
pub fn screen_indices(
    stats: &[SampleStats],
    labels: &[usize],
    num_classes: usize,
    q: usize,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    let mut members = Vec::with_capacity(num_classes);
    let mut effective = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let class: Vec<&SampleStats> = stats
            .iter()
            .filter(|s| s.is_finite() && labels[s.sample_index] == k)
            .collect();
        if class.len() < q {
            return Err(Error::InsufficientSamples {
                class: k,
                available: class.len(),
                required: q,
            });
        }
        let mut losses: Vec<f64> = class.iter().map(|s| s.loss).collect();
        let mut norms: Vec<f64> = class.iter().map(|s| s.grad_norm).collect();
        let mut qk = q;
        loop {
            let thr_loss = qth_smallest(&mut losses, qk);
            let thr_grad = qth_smallest(&mut norms, qk);
            let mut set: Vec<usize> = class
                .iter()
                .filter(|s| s.loss <= thr_loss && s.grad_norm <= thr_grad)
                .map(|s| s.sample_index)
                .collect();
            if !set.is_empty() {
                set.sort_unstable();
                members.push(set);
                effective.push(qk);
                break;
            }
            qk += 1;
        }
    }
    Ok((members, effective))
}

/// Screens easy samples and averages their surrogate logits into anchors.
pub fn select_easy_anchors(
    stats: &[SampleStats],
    dataset: &LabeledDataset,
    model: &dyn Classifier,
    q: usize,
) -> Result<AnchorSet> {
    if stats.len() != dataset.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} stats", dataset.len()),
            actual: format!("{} stats", stats.len()),
        });
    }
    let (members, effective_q) =
        screen_indices(stats, dataset.labels(), dataset.num_classes(), q)?;
    let device = Device::Cpu;
    let mut member_features = Vec::with_capacity(members.len());
    let mut anchors = Vec::with_capacity(members.len());
    for set in &members {
        let x = dataset.features(set, model.dtype(), &device)?;
        let z = model.logits(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let width = z[0].len();
        let mut mean = vec![0.0; width];
        for row in &z {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= z.len() as f64);
        anchors.push(mean);
        member_features.push(z);
    }
    Ok(AnchorSet {
        q,
        effective_q,
        members,
        member_features,
        anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::shuffle;
    use crate::nn::{Activation, ArchSpec, Model};
    use candle_core::Tensor;
    use proptest::prelude::*;

    fn st(i: usize, loss: f64, grad: f64) -> SampleStats {
        SampleStats {
            sample_index: i,
            loss,
            grad_norm: grad,
        }
    }

    #[test]
    fn hand_enumerated_intersection() {
        // losses s1<s2<s3<s4, gradient norms s2<s1<s4<s3
        let stats = vec![st(0, 0.1, 0.2), st(1, 0.2, 0.1), st(2, 0.3, 0.4), st(3, 0.4, 0.3)];
        let (m, q) = screen_indices(&stats, &[0; 4], 1, 2).unwrap();
        assert_eq!(m, vec![vec![0, 1]]);
        assert_eq!(q, vec![2]);
    }

    #[test]
    fn empty_intersection_raises_q() {
        // loss leader is the gradient laggard and vice versa
        let stats = vec![st(0, 0.1, 0.9), st(1, 0.9, 0.1), st(2, 0.5, 0.5)];
        let (m, q) = screen_indices(&stats, &[0; 3], 1, 1).unwrap();
        assert_eq!(q, vec![2]);
        assert_eq!(m, vec![vec![2]]);
    }

    #[test]
    fn ties_all_qualify_and_nan_is_excluded() {
        let stats = vec![st(0, 0.1, 0.1), st(1, 0.1, 0.1), st(2, f64::NAN, 0.0), st(3, 0.5, 0.5)];
        let (m, _) = screen_indices(&stats, &[0; 4], 1, 1).unwrap();
        assert_eq!(m, vec![vec![0, 1]]);
        let err = screen_indices(&stats, &[0; 4], 1, 4).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { available: 3, .. }));
    }

    fn linear_model(weights: &[[f64; 2]; 2]) -> Model {
        let m = Model::new(
            ArchSpec::Mlp {
                hidden: vec![],
                activation: Activation::Relu,
            },
            &[2],
            2,
            DType::F64,
            0,
        )
        .unwrap();
        let data = m.varmap().data().lock().unwrap();
        let flat: Vec<f64> = weights.iter().flatten().copied().collect();
        data["fc0.weight"]
            .set(&Tensor::from_vec(flat, (2, 2), &Device::Cpu).unwrap())
            .unwrap();
        data["fc0.bias"].set(&Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap()).unwrap();
        drop(data);
        m
    }

    #[test]
    fn perfect_confidence_gives_zero_loss_and_gradient() {
        let m = linear_model(&[[1000.0, 0.0], [-1000.0, 0.0]]);
        let d = LabeledDataset::new(vec![2], vec![5.0, 0.0], vec![0], 2).unwrap();
        let s = per_sample_stats(&m, &d, 8).unwrap();
        assert_eq!(s[0].loss, 0.0);
        assert_eq!(s[0].grad_norm, 0.0);
    }

    #[test]
    fn gradient_norm_matches_finite_differences() {
        let m = Model::new(
            ArchSpec::Mlp {
                hidden: vec![6],
                activation: Activation::Tanh,
            },
            &[2],
            2,
            DType::F64,
            11,
        )
        .unwrap();
        let pts = [[0.3, -0.7], [1.2, 0.4], [-0.5, 0.9]];
        let data: Vec<f64> = pts.iter().flatten().copied().collect();
        let d = LabeledDataset::new(vec![2], data, vec![0, 1, 1], 2).unwrap();
        let stats = per_sample_stats(&m, &d, 2).unwrap();
        let loss_at = |x: [f64; 2], y: u32| -> f64 {
            let t = Tensor::new(&[x], &Device::Cpu).unwrap();
            let l = Tensor::new(&[y], &Device::Cpu).unwrap();
            cross_entropy_per_sample(&m.logits(&t).unwrap(), &l).unwrap().to_vec1::<f64>().unwrap()[0]
        };
        let h = 1e-5;
        for (i, p) in pts.iter().enumerate() {
            let y = d.label(i) as u32;
            let mut sq = 0.0;
            for c in 0..2 {
                let mut a = *p;
                let mut b = *p;
                a[c] += h;
                b[c] -= h;
                let g = (loss_at(a, y) - loss_at(b, y)) / (2.0 * h);
                sq += g * g;
            }
            let fd = sq.sqrt();
            assert!((stats[i].grad_norm - fd).abs() / fd < 1e-3);
            assert!((stats[i].loss - loss_at(*p, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_sample_has_identical_stats() {
        let m = linear_model(&[[1.0, 2.0], [-0.5, 0.3]]);
        let d = LabeledDataset::new(vec![2], vec![0.2, 0.1, 0.2, 0.1], vec![1, 1], 2).unwrap();
        let s = per_sample_stats(&m, &d, 2).unwrap();
        assert_eq!(s[0].loss, s[1].loss);
        assert_eq!(s[0].grad_norm, s[1].grad_norm);
    }

    #[test]
    fn single_member_anchor_equals_its_logits() {
        let m = linear_model(&[[1.0, 2.0], [-0.5, 0.3]]);
        let d = LabeledDataset::new(vec![2], vec![0.2, 0.1, -1.0, 0.4], vec![0, 1], 2).unwrap();
        let s = per_sample_stats(&m, &d, 2).unwrap();
        let a = select_easy_anchors(&s, &d, &m, 1).unwrap();
        assert_eq!(a.members, vec![vec![0], vec![1]]);
        let z = crate::nn::dataset_logits(&m, &d, 4).unwrap();
        assert_eq!(a.anchors[0], z[0]);
        assert_eq!(a.anchors[1], z[1]);
    }

    fn arb_stats() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<usize>)> {
        prop::collection::vec((0.0f64..5.0, 0.0f64..5.0, 0usize..3), 9..40).prop_map(|v| {
            let mut labels: Vec<usize> = v.iter().map(|t| t.2).collect();
            // every class gets at least three samples
            for (i, l) in labels.iter_mut().enumerate().take(9) {
                *l = i % 3;
            }
            (v.iter().map(|t| (t.0, t.1)).collect(), labels)
        })
    }

    proptest! {
        #[test]
        fn members_pass_both_thresholds((pairs, labels) in arb_stats(), q in 1usize..4) {
            let stats: Vec<SampleStats> = pairs.iter().enumerate().map(|(i, p)| st(i, p.0, p.1)).collect();
            let (members, eff) = screen_indices(&stats, &labels, 3, q).unwrap();
            for k in 0..3 {
                prop_assert!(!members[k].is_empty());
                prop_assert!(eff[k] >= q);
                let mut l: Vec<f64> = stats.iter().filter(|s| labels[s.sample_index] == k).map(|s| s.loss).collect();
                let mut g: Vec<f64> = stats.iter().filter(|s| labels[s.sample_index] == k).map(|s| s.grad_norm).collect();
                let tl = qth_smallest(&mut l, eff[k]);
                let tg = qth_smallest(&mut g, eff[k]);
                for &i in &members[k] {
                    prop_assert_eq!(labels[i], k);
                    prop_assert!(stats[i].loss <= tl && stats[i].grad_norm <= tg);
                }
            }
        }

        #[test]
        fn increasing_q_never_shrinks((pairs, labels) in arb_stats(), q in 1usize..3) {
            let stats: Vec<SampleStats> = pairs.iter().enumerate().map(|(i, p)| st(i, p.0, p.1)).collect();
            let (small, _) = screen_indices(&stats, &labels, 3, q).unwrap();
            let (large, _) = screen_indices(&stats, &labels, 3, q + 1).unwrap();
            for k in 0..3 {
                for i in &small[k] {
                    prop_assert!(large[k].contains(i));
                }
            }
        }

        #[test]
        fn shuffling_preserves_anchor_sets((pairs, labels) in arb_stats(), seed in 0u64..1000) {
            let stats: Vec<SampleStats> = pairs.iter().enumerate().map(|(i, p)| st(i, p.0, p.1)).collect();
            let (base, _) = screen_indices(&stats, &labels, 3, 2).unwrap();
            let mut shuffled = stats.clone();
            shuffle(&mut shuffled, &mut crate::seed::rng(seed));
            let (again, _) = screen_indices(&shuffled, &labels, 3, 2).unwrap();
            prop_assert_eq!(base, again);
        }
    }
}
