use std::path::Path;

use incgan::datagen::{decode_tensor, encode_tensor};
use incgan::diffcore::{Tape, Tensor};
use incgan::losses::{distillation_loss, eval_scalar, icarl_loss, mtmc_loss, tempered_softmax};
use incgan::memory::{class_mean, class_quota, classify_nme, nearest_indices, select_exemplars, Budget, Quota};
use proptest::prelude::*;

fn vectors(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), n)
}

/// Coarse grid values so that distance ties actually occur.
fn grid_vectors(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec((-2i32..=2).prop_map(|v| v as f32 * 0.5), dim), n)
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

proptest! {
    #[test]
    fn quota_is_floor_and_fits(m in 0usize..5000, t in 1usize..64) {
        let q = class_quota(Budget::Limited(m), t).unwrap();
        prop_assert_eq!(q, Quota::Limited(m / t));
        prop_assert!(t * (m / t) <= m);
    }

    #[test]
    fn selection_prefixes_nest(xs in grid_vectors(1..40, 3), reference in prop::collection::vec(-1.0f32..1.0, 3),
                               a in 0usize..40, b in 0usize..40) {
        let (small, large) = (a.min(b), a.max(b));
        let big = nearest_indices(&xs, &reference, large);
        let sub: Vec<Vec<f32>> = big.iter().map(|&i| xs[i].clone()).collect();
        let again: Vec<usize> = nearest_indices(&sub, &reference, small).into_iter().map(|i| big[i]).collect();
        prop_assert_eq!(again, nearest_indices(&xs, &reference, small));
    }

    #[test]
    fn selection_matches_sort_oracle(xs in grid_vectors(1..50, 4), m in 0usize..60) {
        let eta = class_mean(&xs).unwrap();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| dist(&xs[i], &eta).total_cmp(&dist(&xs[j], &eta)).then(i.cmp(&j)));
        order.truncate(m.min(xs.len()));
        prop_assert_eq!(select_exemplars(&xs, m).unwrap(), order);
    }

    #[test]
    fn nme_is_permutation_equivariant(templates in vectors(2..8, 3), x in prop::collection::vec(-1.0f32..1.0, 3),
                                      shift in 0usize..8) {
        let t = templates.len();
        let labelled: Vec<(usize, Vec<f32>)> = templates.iter().cloned().enumerate().collect();
        let perm = |c: usize| (c + shift) % t;
        let relabelled: Vec<(usize, Vec<f32>)> = labelled.iter().map(|(c, v)| (perm(*c), v.clone())).collect();
        let a = classify_nme(&x, &labelled).unwrap();
        let b = classify_nme(&x, &relabelled).unwrap();
        // continuous inputs make exact ties vanishingly unlikely
        prop_assert_eq!(perm(a), b);
    }

    #[test]
    fn tempered_softmax_is_shift_invariant(logits in prop::collection::vec(-10.0f64..10.0, 1..8),
                                           c in -50.0f64..50.0, temperature in 1.0f64..5.0) {
        let p = tempered_softmax(&logits, temperature);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let q = tempered_softmax(&shifted, temperature);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distillation_is_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6),
                                   temperature in 1.0f64..4.0) {
        let old = Tensor::from_f64(&[2, 3], &b).unwrap();
        let v = eval_scalar(|t: &mut Tape<'_, f64>| {
            let x = t.input(Tensor::from_f64(&[2, 3], &a)?);
            distillation_loss(t, x, &old, temperature)
        }).unwrap();
        prop_assert!(v >= -1e-12 && v.is_finite());
    }

    #[test]
    fn combinations_are_linear(c in -5.0f64..5.0, d in -5.0f64..5.0, gamma in 0.0f64..1.0, lambda in 0.0f64..3.0) {
        let v = eval_scalar(|t| {
            let (cv, dv) = (t.input(Tensor::scalar(c)), t.input(Tensor::scalar(d)));
            let i = icarl_loss(t, cv, dv, gamma)?;
            mtmc_loss(t, i, dv, lambda)
        }).unwrap();
        prop_assert!((v - ((1.0 - gamma) * c + gamma * d + lambda * d)).abs() < 1e-12);
    }

    #[test]
    fn tensor_encoding_round_trips(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
        let t = Tensor::new(dims, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t), Path::new("p")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..60) {
        let t = Tensor::new(vec![2, 3, 2], vec![0.25f32; 12]).unwrap();
        let bytes = encode_tensor(&t);
        let r = decode_tensor(&bytes[..cut.min(bytes.len() - 1)], Path::new("p"));
        prop_assert!(r.is_err());
    }
}

#[test]
fn distillation_identity_hundred_vectors() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let k = rng.random_range(2..10);
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
        for temperature in [1.0, 2.0, 3.0] {
            let old = Tensor::from_f64(&[1, k], &x).unwrap();
            let v = eval_scalar(|t| {
                let n = t.input(old.clone());
                distillation_loss(t, n, &old, temperature)
            })
            .unwrap();
            assert!(v.abs() <= 1e-7, "{v}");
        }
    }
}
