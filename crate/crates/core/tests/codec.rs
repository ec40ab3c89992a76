use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use holomotion::codec::{crop, step_rng, Codec, CodecConfig, PartData, Variant, BODY_RATE, COMMITMENT_WEIGHT, FULL_SCALE_CODEBOOK, HAND_RATE};
use holomotion::corpus::{Corpus, CorpusConfig, Split};
use holomotion::gradcore::{Array, Tape};
use holomotion::pipeline;
use holomotion::quantize::{histogram, perplexity, quantize, Codebook, DEFAULT_DECAY};

fn data(count: usize) -> PartData {
    let corpus = Corpus::generate(&CorpusConfig { count, ..Default::default() }).unwrap();
    let norm = pipeline::fit_normalizer(&corpus).unwrap();
    let frames: Vec<&Array> = corpus.split(Split::Train).iter().map(|i| &i.repr).collect();
    PartData::new(&frames, &corpus.skeleton.layout(), &norm).unwrap()
}

fn small(variant: Variant) -> CodecConfig {
    CodecConfig { variant, width: 32, code_dim: 16, res_blocks: 1, codebook_size: 64, hand_codebook_size: 64, window: 16, ..Default::default() }
}

fn squared_error(a: &Array, b: &Array) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn reference_constants() {
    assert_eq!(COMMITMENT_WEIGHT, 0.02);
    assert_eq!(DEFAULT_DECAY, 0.99);
    assert_eq!(FULL_SCALE_CODEBOOK, 512);
    assert_eq!((BODY_RATE, HAND_RATE), (2, 4));
    let d = CodecConfig::default();
    assert_eq!((d.codebook_size, d.hand_codebook_size, d.commitment), (512, 512, 0.02));
}

#[test]
fn commitment_matches_recomputed_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let book = Codebook::new(32, 6, DEFAULT_DECAY, &mut rng);
    let z = Array::randn(&[3, 5, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = quantize(&mut tape, zv, &book).unwrap();
    let mut want = 0.0;
    for (r, &i) in out.indices.iter().enumerate() {
        let e = book.entries.row(i);
        want += z.data()[r * 6..(r + 1) * 6].iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    assert!((tape.value(out.commitment).item() - want).abs() <= 1e-12 * want.max(1.0));
}

#[test]
fn perplexity_matches_direct_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let hist: Vec<u64> = (0..40).map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(1..50) }).collect();
        if hist.iter().all(|&c| c == 0) {
            continue;
        }
        let n: u64 = hist.iter().sum();
        let mut entropy = 0.0;
        for &c in &hist {
            if c > 0 {
                let p = c as f64 / n as f64;
                entropy += p * (1.0 / p).ln();
            }
        }
        assert!((perplexity(&hist).unwrap() - entropy.exp()).abs() < 1e-9);
    }
    assert_eq!(perplexity(&histogram(&[3, 3, 3], 8)).unwrap(), 1.0);
    assert!(perplexity(&[0, 0]).is_err());
}

#[test]
fn large_codebooks_encode_deterministically() {
    let data = data(24);
    for size in [512, 1024] {
        let cfg = CodecConfig { codebook_size: size, hand_codebook_size: size, ..small(Variant::H2vq) };
        let codec = Codec::new(cfg, data.body[0].cols(), data.hand[0].cols()).unwrap();
        assert_eq!(codec.books.iter().map(Codebook::size).collect::<Vec<_>>(), [size, size]);
        let (b, h) = crop(&data.body[0], &data.hand[0], HAND_RATE).unwrap();
        let first = codec.encode(&b, &h).unwrap();
        assert_eq!(first, codec.encode(&b, &h).unwrap());
        assert_eq!(first.body().len(), b.rows() / BODY_RATE);
        assert_eq!(first.hand().len(), b.rows() / HAND_RATE);
        assert!(first.streams.iter().flatten().all(|&i| i < size));
        let (db, dh) = codec.decode(&first).unwrap();
        assert_eq!((db.shape(), dh.shape()), (b.shape(), h.shape()));
    }
}

#[test]
fn every_variant_overfits_one_batch() {
    let data = data(24);
    for variant in [Variant::Vanilla, Variant::Rvq, Variant::H2vq] {
        let mut codec = Codec::new(small(variant), data.body[0].cols(), data.hand[0].cols()).unwrap();
        let (body, hand) = data.sample(4, 16, &mut step_rng(1, 0)).unwrap();
        let error = |codec: &Codec| -> f64 {
            (0..4)
                .map(|i| {
                    let (bi, hi) = (slab(&body, i), slab(&hand, i));
                    let (rb, rh) = codec.reconstruct(&bi, &hi).unwrap();
                    squared_error(&rb, &bi) + squared_error(&rh, &hi)
                })
                .sum()
        };
        let untrained = error(&codec);
        let losses: Vec<f64> = (0..200).map(|_| codec.train_step(&body, &hand).unwrap().reconstruction).collect();
        assert!(losses[199] < losses[0], "{variant:?}: {} -> {}", losses[0], losses[199]);
        let trained = error(&codec);
        assert!(trained * 5.0 <= untrained, "{variant:?}: {untrained} -> {trained}");
    }
}

fn slab(a: &Array, i: usize) -> Array {
    let (t, c) = (a.shape()[1], a.shape()[2]);
    Array::new(&[t, c], a.data()[i * t * c..(i + 1) * t * c].to_vec()).unwrap()
}

#[test]
fn training_is_reproducible() {
    let data = data(24);
    let run = || {
        let mut codec = Codec::new(small(Variant::H2vq), data.body[0].cols(), data.hand[0].cols()).unwrap();
        let mut losses = Vec::new();
        codec.train(&data, 5, |_, l| losses.push(l.total)).unwrap();
        (losses, codec.books)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decoding_preserves_length(steps in 1usize..12, seed in any::<u64>()) {
        let cfg = small(Variant::H2vq);
        let codec = Codec::new(cfg, 5, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hand: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..64)).collect();
        let body: Vec<usize> = (0..2 * steps).map(|_| rng.gen_range(0..64)).collect();
        let codes = holomotion::codec::CodeIndices { streams: vec![body, hand] };
        let (b, h) = codec.decode(&codes).unwrap();
        prop_assert_eq!(b.shape(), &[4 * steps, 5][..]);
        prop_assert_eq!(h.shape(), &[4 * steps, 7][..]);
    }
}
