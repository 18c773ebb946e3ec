//! Property tests for the augmentation arithmetic.

use plasm::augment::{cutmix, mixup, replay_labels, AugmentedBatch};
use plasm::tensor::Tensor;
use proptest::prelude::*;

fn batch_strategy() -> impl Strategy<Value = (AugmentedBatch, f64, usize)> {
    (2usize..6, 0.0..=1.0f64, 1usize..5).prop_flat_map(|(n, lambda, shift)| {
        let pixels = prop::collection::vec(0.0..=1.0f64, n * 2 * 4 * 4);
        let labels = prop::collection::vec(0.0..=1.0f64, n);
        (pixels, labels, Just(n), Just(lambda), Just(shift)).prop_map(
            |(pixels, labels, n, lambda, shift)| {
                let batch = AugmentedBatch::new(
                    Tensor::new(vec![n, 2, 4, 4], pixels).unwrap(),
                    Tensor::new(vec![n], labels).unwrap(),
                )
                .unwrap();
                (batch, lambda, shift % n.max(1))
            },
        )
    })
}

fn rotation(n: usize, shift: usize) -> Vec<usize> {
    (0..n).map(|i| (i + shift) % n).collect()
}

proptest! {
    /// Every augmented pixel and label lies within [min, max] of its sources.
    #[test]
    fn mixup_is_convex((batch, lambda, shift) in batch_strategy()) {
        let pairing = rotation(batch.batch_size(), shift);
        let out = mixup(&batch, lambda, &pairing).unwrap();
        let n = batch.batch_size();
        let sample_len = batch.images.len() / n;
        for i in 0..n {
            let own = &batch.images.data()[i * sample_len..][..sample_len];
            let partner = &batch.images.data()[pairing[i] * sample_len..][..sample_len];
            let mixed = &out.images.data()[i * sample_len..][..sample_len];
            for k in 0..sample_len {
                let lo = own[k].min(partner[k]) - 1e-12;
                let hi = own[k].max(partner[k]) + 1e-12;
                prop_assert!(mixed[k] >= lo && mixed[k] <= hi);
            }
            let (la, lb) = (batch.labels.data()[i], batch.labels.data()[pairing[i]]);
            let l = out.labels.data()[i];
            prop_assert!(l >= la.min(lb) - 1e-12 && l <= la.max(lb) + 1e-12);
        }
    }

    /// MixUp with any fixed lambda and permutation pairing conserves the
    /// batch label mean (doubly stochastic mixing).
    #[test]
    fn mixup_conserves_label_mean((batch, lambda, shift) in batch_strategy()) {
        let pairing = rotation(batch.batch_size(), shift);
        let out = mixup(&batch, lambda, &pairing).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
        prop_assert!((mean(&batch.labels) - mean(&out.labels)).abs() < 1e-12);
    }

    /// CutMix lambda_eff stays in [0,1]; a zero-area patch is an exact
    /// identity; convexity holds for pixels and labels.
    #[test]
    fn cutmix_lambda_eff_and_convexity((batch, lambda, shift) in batch_strategy()) {
        let pairing = rotation(batch.batch_size(), shift);
        let mut rng = plasm::rng::stream(7, &[shift as u64]);
        let out = cutmix(&batch, lambda, &pairing, &mut rng).unwrap();
        let stage = out.provenance.last().unwrap();
        let n = batch.batch_size();
        let sample_len = batch.images.len() / n;
        for i in 0..n {
            let mix = &stage.mixes[i];
            prop_assert!((0.0..=1.0).contains(&mix.lambda_eff));
            if mix.patch.is_none() {
                prop_assert_eq!(mix.lambda_eff, 1.0);
                let own = &batch.images.data()[i * sample_len..][..sample_len];
                let got = &out.images.data()[i * sample_len..][..sample_len];
                prop_assert_eq!(own, got);
                prop_assert_eq!(out.labels.data()[i], batch.labels.data()[i]);
            }
            // Pixels come verbatim from one of the two sources.
            let own = &batch.images.data()[i * sample_len..][..sample_len];
            let partner = &batch.images.data()[pairing[i] * sample_len..][..sample_len];
            let got = &out.images.data()[i * sample_len..][..sample_len];
            for k in 0..sample_len {
                prop_assert!(got[k] == own[k] || got[k] == partner[k]);
            }
        }
    }

    /// Labels replayed from provenance match emitted labels.
    #[test]
    fn labels_replay_from_provenance((batch, lambda, shift) in batch_strategy()) {
        let pairing = rotation(batch.batch_size(), shift);
        let after_mixup = mixup(&batch, lambda, &pairing).unwrap();
        let mut rng = plasm::rng::stream(11, &[shift as u64]);
        let pairing2 = rotation(batch.batch_size(), (shift + 1) % batch.batch_size().max(1));
        let out = cutmix(&after_mixup, 1.0 - lambda, &pairing2, &mut rng).unwrap();
        let replayed = replay_labels(batch.labels.data(), &out.provenance);
        for (a, b) in replayed.iter().zip(out.labels.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
