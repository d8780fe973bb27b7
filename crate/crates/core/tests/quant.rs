use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadnn::data::{synth_cls_dataset, synth_seg_dataset, Sample};
use sadnn::models::{batch, train, ModelConfig, NetworkGraph, TrainOptions};
use sadnn::quant::*;
use sadnn::{with_threads, Tensor};

fn trained(cfg: ModelConfig, data: &[Sample], epochs: usize) -> NetworkGraph {
    let mut net = NetworkGraph::build(&cfg).unwrap();
    let opts = TrainOptions {
        epochs,
        lr: 3e-3,
        batch_size: 8,
        seed: 3,
    };
    train(&mut net, data, &opts).unwrap();
    net
}

fn images(samples: &[Sample]) -> Tensor<f32> {
    batch(&samples.iter().collect::<Vec<_>>()).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip_within_half_scale(lo in -50.0f64..0.0, hi in 1e-3f64..50.0, t in 0.0f64..=1.0) {
        let qp = compute_qparams(lo, hi).unwrap();
        let (a, b) = qp.range();
        let r = a + t * (b - a);
        let err = (qp.dequantize(qp.quantize(r)) - r).abs();
        prop_assert!(err <= qp.scale / 2.0, "r {} err {} S {}", r, err, qp.scale);
    }

    #[test]
    fn zero_is_exact(lo in -50.0f64..=0.0, hi in 0.0f64..50.0) {
        let qp = compute_qparams(lo, hi).unwrap();
        prop_assert_eq!(qp.dequantize(qp.zero_point as i8), 0.0);
        prop_assert_eq!(qp.quantize(0.0) as i32, qp.zero_point);
        prop_assert_eq!(qp.dequantize((qp.zero_point + 1).min(127) as i8) == qp.scale, qp.zero_point < 127);
    }

    #[test]
    fn tensor_round_trip(values in prop::collection::vec(-4.0f32..4.0, 1..64)) {
        let qp = compute_qparams(-4.0, 4.0).unwrap();
        let t = Tensor::new(&[values.len()], values.clone()).unwrap();
        let back = dequantize(&quantize_tensor(&t, qp));
        for (a, b) in back.data().iter().zip(&values) {
            prop_assert!(((*a - *b).abs() as f64) <= qp.scale / 2.0 * (1.0 + 1e-6));
        }
    }
}

#[test]
fn quantized_matmul_matches_float64_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let qa = compute_qparams(-rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)).unwrap();
        let qb = symmetric_qparams(rng.random_range(0.1..1.0)).unwrap();
        let a = QuantizedTensor {
            data: Tensor::from_fn(&[8, 8], |_| rng.random_range(-128..=127i32) as i8),
            qparams: qa,
        };
        let b = QuantizedTensor {
            data: Tensor::from_fn(&[8, 8], |_| rng.random_range(-127..=127i32) as i8),
            qparams: qb,
        };
        let real: Vec<f64> = (0..64)
            .map(|idx| (0..8).map(|p| qa.dequantize(a.data.data()[idx / 8 * 8 + p]) * qb.dequantize(b.data.data()[p * 8 + idx % 8])).sum())
            .collect();
        let lo = real.iter().cloned().fold(0.0, f64::min);
        let hi = real.iter().cloned().fold(0.0, f64::max);
        let out = compute_qparams(lo, hi).unwrap();
        let got = quantized_matmul(&a, &b, None, out).unwrap();
        for (g, r) in got.data.data().iter().zip(&real) {
            assert!((*g as i32 - out.quantize(*r) as i32).abs() <= 1);
        }
    }
}

#[test]
fn calibrated_sites_cover_held_out_activations() {
    let data = synth_seg_dataset(96, 32, 21).unwrap();
    let net = trained(ModelConfig::toy_seg(), &data[..64], 3);
    let stats = calibrate_samples(&net, &data[..32], 8).unwrap();
    let held_out = images(&data[64..]);
    let coverage = site_coverage(&net, &stats, &held_out).unwrap();
    assert!(coverage >= 0.99, "{coverage}");
    let q = quantize_network(&net, &stats).unwrap();
    for site in q.sites.keys() {
        assert!(stats.sites.contains_key(site), "{site}");
    }
}

#[test]
fn calibrating_on_nothing_is_an_error() {
    let net = NetworkGraph::build(&ModelConfig::toy_seg()).unwrap();
    assert!(calibrate(&net, std::iter::empty()).is_err());
    let mut stats = calibrate_samples(&net, &synth_seg_dataset(4, 32, 1).unwrap(), 4).unwrap();
    stats.sites.remove(INPUT_SITE);
    assert!(quantize_network(&net, &stats).is_err());
}

#[test]
fn quantization_and_inference_are_deterministic() {
    let data = synth_cls_dataset(64, 32, 3, 4).unwrap();
    let net = trained(ModelConfig::toy_cls(), &data, 1);
    let stats = calibrate_samples(&net, &data, 16).unwrap();
    let a = quantize_network(&net, &stats).unwrap();
    let b = quantize_network(&net, &stats).unwrap();
    assert_eq!(a, b);
    let x = images(&data[..16]);
    let y1 = a.forward(&x).unwrap();
    assert_eq!(y1, a.forward(&x).unwrap());
    let y3 = with_threads(3, || a.forward(&x).unwrap()).unwrap();
    assert_eq!(y1, y3);
}

#[test]
fn zero_input_tracks_float_path() {
    let data = synth_cls_dataset(256, 32, 3, 6).unwrap();
    let net = trained(ModelConfig::toy_cls(), &data, 2);
    let mut calib: Vec<Sample> = data[..64].to_vec();
    calib.push(Sample {
        image: Tensor::zeros(&[1, 32, 32]),
        label: Tensor::zeros(&[3]),
    });
    let stats = calibrate_samples(&net, &calib, 16).unwrap();
    let q = quantize_network(&net, &stats).unwrap();
    let zero = Tensor::zeros(&[1, 1, 32, 32]);
    let float: Tensor<f32> = net.forward(&zero).unwrap();
    let quant = q.forward(&zero).unwrap();
    let s = q.output_params().unwrap().scale;
    for (a, b) in float.data().iter().zip(quant.data()) {
        assert!(((a - b).abs() as f64) <= 2.0 * s, "{a} vs {b}, S {s}");
    }
}

#[test]
fn quantized_network_has_int8_weights_and_matching_params() {
    let data = synth_seg_dataset(16, 32, 2).unwrap();
    let net = NetworkGraph::build(&ModelConfig::toy_seg()).unwrap();
    let q = quantize_network(&net, &calibrate_samples(&net, &data, 8).unwrap()).unwrap();
    assert_eq!(q.param_count(), net.param_count());
    for (k, w) in &q.weights {
        assert_eq!(w.qparams.zero_point, 0, "{k}");
        assert_eq!(w.shape(), net.params[k].shape());
    }
    let p = q.predict(&images(&data[..4])).unwrap();
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
