use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use esma_core::dataset::LabeledDataset;
use esma_core::evaluation::{
    density_shift_report, random_targets, success_rate, targeted_transfer_success, TargetAveraging,
};
use esma_core::generator::AdversarialBatch;
use esma_core::nn::{Activation, ArchSpec, Classifier, Ensemble, Model};

/// Always predicts `class`.
struct Constant {
    class: usize,
    k: usize,
}

impl Classifier for Constant {
    fn logits(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let n = x.dim(0)?;
        let row: Vec<f64> = (0..self.k).map(|j| if j == self.class { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(row.repeat(n), (n, self.k), &Device::Cpu)
    }
    fn num_classes(&self) -> usize {
        self.k
    }
    fn dtype(&self) -> DType {
        DType::F64
    }
}

fn batch(n: usize, k: usize, targets: Vec<usize>, seed: u64) -> AdversarialBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let originals: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
    let sources: Vec<usize> = targets.iter().map(|t| (t + 1) % k).collect();
    AdversarialBatch {
        shape: vec![4],
        adversarials: originals.clone(),
        originals,
        sources,
        skipped: vec![false; targets.len()],
        targets,
    }
}

#[test]
fn constant_victim_always_hits_its_own_class() {
    let b = batch(30, 4, vec![2; 30], 1);
    let always = Constant { class: 2, k: 4 };
    let never = Constant { class: 1, k: 4 };
    let rates = targeted_transfer_success(&[&always, &never], &b).unwrap();
    assert_eq!(rates, vec![1.0, 0.0]);
}

#[test]
fn success_rate_matches_hand_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut hits = 0;
        for i in 0..n {
            if p[i] == t[i] {
                hits += 1;
            }
        }
        assert_eq!(success_rate(&p, &t).unwrap(), hits as f64 / n as f64);
    }
    assert_eq!(success_rate(&[], &[]).unwrap(), 0.0);
    assert!(success_rate(&[0], &[]).is_err());
}

#[test]
fn skipped_samples_are_not_scored() {
    let mut b = batch(10, 3, vec![0; 10], 2);
    b.skipped[..4].iter_mut().for_each(|s| *s = true);
    let rates = targeted_transfer_success(&[&Constant { class: 0, k: 3 }], &b).unwrap();
    assert_eq!(rates, vec![1.0]);
}

#[test]
fn random_targets_avoid_labels_and_are_seeded() {
    let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
    let t = random_targets(&labels, 5, 9).unwrap();
    assert!(t.iter().zip(&labels).all(|(a, b)| a != b && *a < 5));
    assert_eq!(t, random_targets(&labels, 5, 9).unwrap());
    assert_ne!(t, random_targets(&labels, 5, 10).unwrap());
}

#[test]
fn unchanged_images_give_identical_density_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = LabeledDataset::new(
        vec![2],
        (0..200).map(|_| rng.random_range(0.0..1.0)).collect(),
        (0..100).map(|i| i % 2).collect(),
        2,
    )
    .unwrap();
    let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = (0..40).map(|i| i % 2).collect();
    for averaging in [TargetAveraging::Assigned, TargetAveraging::AllTargets] {
        let r = density_shift_report(&refs, &refs, &reference, &targets, 0.2, 10, averaging).unwrap();
        assert_eq!(r.clean, r.adversarial);
        assert_eq!(r.clean_counts, r.adversarial_counts);
        assert_eq!(r.clean_counts.iter().sum::<usize>(), 40);
        assert!(r.test.p_greater > 0.4);
        let again = density_shift_report(&refs, &refs, &reference, &targets, 0.2, 10, averaging).unwrap();
        assert_eq!(r, again);
    }
}

#[test]
fn ensemble_of_one_is_the_member() {
    let m = Model::new(
        ArchSpec::Mlp {
            hidden: vec![5],
            activation: Activation::Relu,
        },
        &[3],
        4,
        DType::F64,
        1,
    )
    .unwrap();
    let x = Tensor::from_vec((0..12).map(|v| v as f64 / 7.0).collect::<Vec<_>>(), (4, 3), &Device::Cpu).unwrap();
    let e = Ensemble::new(vec![&m]).unwrap();
    let a = m.logits(&x).unwrap().to_vec2::<f64>().unwrap();
    let b = e.logits(&x).unwrap().to_vec2::<f64>().unwrap();
    assert_eq!(a, b);
}
