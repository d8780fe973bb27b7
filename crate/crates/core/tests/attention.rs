use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadnn::attention::*;
use sadnn::reference::{reference_attention, Counters, RefAttention};
use sadnn::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matches_literal_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (ci, co, kh, kw, h, w) in [(1, 2, 3, 3, 5, 6), (3, 4, 1, 1, 4, 4), (2, 6, 3, 5, 7, 5), (4, 2, 5, 5, 6, 6)] {
        let spec = AttentionSpec::new(ci, co, kh, kw).unwrap();
        let weights = AttentionWeights::<f64>::init(&spec, &mut rng);
        let x = random(&[2, ci, h, w], &mut rng);
        let got = attention_forward(&x, &spec, &weights).unwrap();
        let mut counters = Counters::default();
        let want = reference_attention(&x, &RefAttention::from_weights(&spec, &weights), &mut counters).unwrap();
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        let ops = attention_op_count(&spec, h, w);
        assert_eq!(counters.attention().mul, 2 * ops.total.mul);
    }
}

#[test]
fn f32_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = AttentionSpec::square(3, 4, 3).unwrap();
    let w = AttentionWeights::<f64>::init(&spec, &mut rng);
    let x = random(&[1, 3, 8, 8], &mut rng);
    let hi = attention_forward(&x, &spec, &w).unwrap();
    let lo = attention_forward(&x.cast::<f32>(), &spec, &w.cast::<f32>()).unwrap();
    for (a, b) in lo.data().iter().zip(hi.data()) {
        assert!((*a as f64 - b).abs() < 1e-4);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(AttentionSpec::square(0, 4, 3).is_err());
    assert!(AttentionSpec::square(2, 4, 2).is_err());
    let spec = AttentionSpec::square(2, 4, 3).unwrap();
    let w = AttentionWeights::<f64>::zeros(&spec);
    assert!(attention_forward(&Tensor::<f64>::zeros(&[1, 3, 4, 4]), &spec, &w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_weights_are_a_distribution(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AttentionSpec::square(2, 4, k).unwrap();
        let w = AttentionWeights::<f64>::init(&spec, &mut rng);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let (_, cache) = attention_forward_cached(&x, &spec, &w).unwrap();
        for p in 0..cache.pixel_count() {
            let s: f64 = cache.weights_at(p, spec.window_area()).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_padding_is_translation_equivariant(seed in any::<u64>(), dy in 0usize..6, dx in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AttentionSpec::square(2, 4, 3).unwrap().with_padding(Padding::Wrap);
        let w = AttentionWeights::<f64>::init(&spec, &mut rng);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let roll = |t: &Tensor<f64>, c: usize| Tensor::from_fn(&[1, c, 6, 6], |i| {
            let (ch, y, xx) = (i / 36, i / 6 % 6, i % 6);
            t.data()[ch * 36 + (y + 6 - dy) % 6 * 6 + (xx + 6 - dx) % 6]
        });
        let a = roll(&attention_forward(&x, &spec, &w).unwrap(), 4);
        let b = attention_forward(&roll(&x, 2), &spec, &w).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
