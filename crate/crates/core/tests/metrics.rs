use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use holomotion::facecvae::{LAMBDA_E as FACE_LAMBDA_E, LAMBDA_KL as FACE_LAMBDA_KL};
use holomotion::gradcore::{Array, Tape};
use holomotion::io::EvalConfig;
use holomotion::metrics::{
    diversity, evaluate_system, format_report, matching_score, mmodality, r_precision, Generated, DIVERSITY_PAIRS, REPETITIONS,
    R_PRECISION_POOL, TMR_R_PRECISION_POOL,
};
use holomotion::seqvae::{four_term_kl, GaussianVars};

fn randn(n: usize, k: usize, seed: u64) -> Array {
    Array::randn(&[n, k], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn reference_constants() {
    assert_eq!((DIVERSITY_PAIRS, REPETITIONS), (300, 5));
    assert_eq!((R_PRECISION_POOL, TMR_R_PRECISION_POOL), (32, 256));
    let d = EvalConfig::default();
    assert_eq!((d.repetitions, d.mmodality_generations), (5, 10));
    assert_eq!((FACE_LAMBDA_KL, FACE_LAMBDA_E), (1e-5, 1e-5));
}

#[test]
fn diversity_of_two_points_is_their_distance() {
    let a = Array::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    let d = diversity(&a, 300, 0).unwrap();
    assert_eq!((d.value, d.pairs, d.clamped), (5.0, 1, true));
}

#[test]
fn matching_score_matches_brute_force() {
    let (t, m) = (randn(40, 6, 1), randn(40, 6, 2));
    let mut want = 0.0;
    for i in 0..40 {
        let mut s = 0.0;
        for k in 0..6 {
            s += (t.row(i)[k] - m.row(i)[k]).powi(2);
        }
        want += s.sqrt();
    }
    assert!((matching_score(&t, &m).unwrap() - want / 40.0).abs() < 1e-12);
}

#[test]
fn random_embeddings_score_chance_r_precision() {
    let (t, m) = (randn(4000, 8, 3), randn(4000, 8, 4));
    let r = r_precision(&t, &m, 32, 0).unwrap();
    for (k, v) in r.iter().enumerate() {
        let chance = (k + 1) as f64 / 32.0;
        assert!((v - chance).abs() < 0.015, "top{} {v} vs {chance}", k + 1);
    }
}

#[test]
fn reports_are_reproducible() {
    let text = randn(64, 8, 5);
    let real = randn(64, 8, 6);
    let row = || {
        evaluate_system("Generator", &text, &real, 3, 11, |rep| {
            Ok(Generated { motion: randn(64, 8, 100 + rep as u64), groups: vec![randn(4, 8, 200 + rep as u64)] })
        })
        .unwrap()
    };
    let (a, b) = (row(), row());
    assert_eq!(a, b);
    assert_eq!(format_report(&[a.clone()], "x"), format_report(&[b], "x"));
    // pool of 256 cannot be filled by 64 rows
    assert!(a.tmr_r_precision[0].is_none());
    assert!(a.r_precision[0].is_some() && a.fid.is_some() && a.mmodality.is_some());
    assert!(format_report(&[a], "x").contains("n/a"));
}

#[test]
fn kl_sum_vanishes_at_the_standard_normal() {
    let mut tape = Tape::new();
    let zero = || Array::zeros(&[3, 4]);
    let a = GaussianVars { mu: tape.constant(zero()), logvar: tape.constant(zero()) };
    let b = GaussianVars { mu: tape.constant(zero()), logvar: tape.constant(zero()) };
    let kl = four_term_kl(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(kl).item(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mmodality_ignores_prompt_and_sample_order(seed in any::<u64>(), prompts in 1usize..6, per in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<Array> = (0..prompts).map(|p| randn(per, 5, seed ^ p as u64)).collect();
        let base = mmodality(&groups).unwrap();
        let mut shuffled: Vec<Array> = groups
            .iter()
            .map(|g| {
                let mut rows: Vec<usize> = (0..per).collect();
                rows.shuffle(&mut rng);
                let data = rows.iter().flat_map(|&r| g.row(r).to_vec()).collect();
                Array::new(&[per, 5], data).unwrap()
            })
            .collect();
        shuffled.shuffle(&mut rng);
        prop_assert!((mmodality(&shuffled).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn diversity_is_translation_invariant(seed in any::<u64>(), shift in -10.0f64..10.0) {
        let a = randn(30, 4, seed);
        let b = Array::new(&[30, 4], a.data().iter().map(|v| v + shift).collect()).unwrap();
        let (da, db) = (diversity(&a, 50, 1).unwrap(), diversity(&b, 50, 1).unwrap());
        prop_assert!((da.value - db.value).abs() < 1e-9);
    }
}
