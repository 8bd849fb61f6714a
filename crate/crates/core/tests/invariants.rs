use proptest::prelude::*;

use esma_core::dataset::LabeledDataset;
use esma_core::density::{ball_members, density_binned_statistic, local_sample_density, DensityQuery};
use esma_core::embeddings::{manifold_matching_loss, pairwise_matrices, EmbeddingBank};
use esma_core::generator::{bem_mix, group_weights};
use esma_core::watermark::{erasure_bit_error_rate, psnr, WatermarkMessage};

fn points() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1usize..30).prop_flat_map(|n| (prop::collection::vec(-1.0f64..1.0, n * 2), prop::collection::vec(0usize..2, n)))
}

proptest! {
    #[test]
    fn density_grows_with_radius((data, labels) in points(), r in 0.05f64..1.0, cx in -1.0f64..1.0, cy in -1.0f64..1.0) {
        let ds = LabeledDataset::new(vec![2], data, labels, 2).unwrap();
        let small = ball_members(&ds, &DensityQuery::new(0, vec![cx, cy], r).unwrap()).unwrap();
        let large = ball_members(&ds, &DensityQuery::new(0, vec![cx, cy], 2.0 * r).unwrap()).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)));
        let est = local_sample_density(&ds, &DensityQuery::new(0, vec![cx, cy], r).unwrap()).unwrap();
        prop_assert!(est.density >= 0.0);
        prop_assert_eq!(est.count_in_ball, small.len());
    }

    #[test]
    fn bins_partition_the_samples(vals in prop::collection::vec(-5.0f64..5.0, 2..60), seed in 0u64..1000, n_bins in 2usize..15) {
        let dens: Vec<f64> = (0..vals.len()).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64).collect();
        let s = density_binned_statistic(&vals, &dens, n_bins).unwrap();
        prop_assert_eq!(s.bins.iter().map(|b| b.count).sum::<usize>(), vals.len());
        for b in &s.bins {
            prop_assert_eq!(b.mean.is_some(), b.count > 0);
        }
    }

    #[test]
    fn pairwise_matrices_are_symmetric(v in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 2..6)) {
        let m = pairwise_matrices(&v).unwrap();
        for i in 0..v.len() {
            prop_assert_eq!(m.euclidean[i][i], 0.0);
            for j in 0..v.len() {
                prop_assert_eq!(m.euclidean[i][j], m.euclidean[j][i]);
                prop_assert_eq!(m.cosine[i][j], m.cosine[j][i]);
                prop_assert!(m.cosine[i][j] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn manifold_loss_is_non_negative(seed in 0u64..500, k in 2usize..6) {
        let means: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| ((i * 7 + j * 3 + seed as usize) % 11) as f64 - 5.0 + 0.5).collect()).collect();
        let bank = EmbeddingBank::init(means, 4, 1.0, 1e-3, seed).unwrap();
        prop_assert!(manifold_matching_loss(&bank).unwrap() >= 0.0);
    }

    #[test]
    fn mix_stays_between_endpoints(u in prop::collection::vec(-3.0f64..3.0, 5), v in prop::collection::vec(-3.0f64..3.0, 5), z in 0.0f64..=1.0) {
        let m = bem_mix(&u, &v, z).unwrap();
        for i in 0..5 {
            prop_assert!(m[i] >= u[i].min(v[i]) && m[i] <= u[i].max(v[i]));
        }
        prop_assert_eq!(bem_mix(&u, &v, 1.0).unwrap(), u.clone());
    }

    #[test]
    fn group_weights_sum_to_target_count(sources in prop::collection::vec(0usize..4, 1..40), shift in prop::collection::vec(0usize..4, 40)) {
        let targets: Vec<usize> = sources.iter().zip(&shift).map(|(s, d)| (s + d) % 4).collect();
        if let Ok(w) = group_weights(&sources, &targets) {
            let groups: std::collections::BTreeSet<usize> = sources.iter().zip(&targets).filter(|(s, t)| s != t).map(|(_, t)| *t).collect();
            prop_assert!((w.iter().sum::<f64>() - groups.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn erasure_bits_lie_in_unit_interval(a in prop::collection::vec(prop::collection::vec(0u8..2, 8), 1..10), b in prop::collection::vec(prop::collection::vec(0u8..2, 8), 10)) {
        let enc: Vec<WatermarkMessage> = a.iter().map(|m| WatermarkMessage::new(m.clone()).unwrap()).collect();
        let att: Vec<WatermarkMessage> = b[..a.len()].iter().map(|m| WatermarkMessage::new(m.clone()).unwrap()).collect();
        let r = erasure_bit_error_rate(&enc, &att).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(erasure_bit_error_rate(&enc, &enc).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_noise(x in prop::collection::vec(0.2f64..0.8, 16), d in 0.01f64..0.1) {
        let small: Vec<f64> = x.iter().map(|v| v + d).collect();
        let large: Vec<f64> = x.iter().map(|v| v + 2.0 * d).collect();
        prop_assert!(psnr(&x, &small, 1.0).unwrap() > psnr(&x, &large, 1.0).unwrap());
    }
}
