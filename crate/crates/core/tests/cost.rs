use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadnn::attention::{attention_op_count, AttentionSpec, Padding};
use sadnn::checkpoint::{float_archive, CONFIG_RECORD};
use sadnn::cost::*;
use sadnn::data::TensorData;
use sadnn::models::{ModelConfig, NetworkGraph};
use sadnn::reference::{instrumented_forward, reference_attention, reference_conv2d, reference_linear, Counters, RefAttention};
use sadnn::verify::{RESNET18_SPEC, RESNET50_SPEC, SUMNET_SPEC, UNET_SMALL_SPEC};
use sadnn::{Error, Tensor};

const GOLDEN_TOY_CLS: &str = include_str!("golden/toy_cls_report.toml");

fn spec_of(text: &str) -> NetworkSpec {
    parse_spec(text).unwrap()
}

fn total_at(text: &str, input: [usize; 3]) -> u64 {
    let r = analyze("x", &spec_of(text), Some(&input), &EnergyTable::default()).unwrap();
    r.ops_total_paper_convention
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn published_energy_examples() {
    let t = EnergyTable::default();
    let j = |ops: f64, p| energy_from_total(ops, &t, p);
    assert!((j(9.10e9, Precision::Fp32) - 20.93e-3).abs() < 1e-12);
    assert!((j(9.10e9, Precision::Int8) - 1.0465e-3).abs() < 1e-12);
    assert!((j(277.15e9, Precision::Int8) - 31.87225e-3).abs() < 1e-12);
    let ops = OpTally { mul: 4_550_000_000, add: 4_550_000_000 };
    assert!((estimate_energy(&ops, &t, Precision::Fp32) - j(9.10e9, Precision::Fp32)).abs() < 1e-15);
}

#[test]
fn model_size_examples() {
    assert_eq!(model_size(4_560_000, Precision::Fp32).payload_bytes, 18_240_000);
    assert_eq!(model_size(11_170_000, Precision::Fp32).payload_bytes, 44_680_000);
    let empty = model_size(0, Precision::Int8);
    assert_eq!(empty.payload_bytes, 0);
    assert_eq!(empty.total(), empty.overhead_bytes);
    assert!(empty.overhead_bytes > 0);
}

#[test]
fn resnet_parameter_counts() {
    let r18 = analyze("r18", &spec_of(RESNET18_SPEC), None, &EnergyTable::default()).unwrap();
    let r50 = analyze("r50", &spec_of(RESNET50_SPEC), None, &EnergyTable::default()).unwrap();
    assert_eq!(r18.params, 11_183_694);
    assert_eq!(r50.params, 23_536_718);
    assert!((r18.params as f64 / 11.17e6 - 1.0).abs() <= 0.005);
    assert!((r50.params as f64 / 23.53e6 - 1.0).abs() <= 0.005);
}

/// Hand count of ResNet-18 with a 14-way head, layer group by layer group.
#[test]
fn resnet18_hand_count() {
    let conv = |ci: u64, co: u64, k: u64| ci * co * k * k;
    let bn = |c: u64| 2 * c;
    let stem = conv(3, 64, 7) + bn(64);
    let basic = |ci: u64, co: u64| conv(ci, co, 3) + bn(co) + conv(co, co, 3) + bn(co);
    let down = |ci: u64, co: u64| conv(ci, co, 1) + bn(co);
    let body = 2 * basic(64, 64)
        + basic(64, 128) + down(64, 128) + basic(128, 128)
        + basic(128, 256) + down(128, 256) + basic(256, 256)
        + basic(256, 512) + down(256, 512) + basic(512, 512);
    let head = 512 * 14 + 14;
    let r = analyze("r18", &spec_of(RESNET18_SPEC), None, &EnergyTable::default()).unwrap();
    assert_eq!(r.params, stem + body + head);
}

#[test]
fn segmentation_baseline_counts() {
    let unet = analyze("unet", &spec_of(UNET_SMALL_SPEC), None, &EnergyTable::default()).unwrap();
    assert_eq!(unet.params, 31_036_481);
    let sumnet = analyze("sumnet", &spec_of(SUMNET_SPEC), None, &EnergyTable::default()).unwrap();
    assert_eq!(sumnet.params, 23_856_641);
}

/// Baseline ops depend on the input size, which the published tables do not
/// state; counts are pinned per size and 351-352 px is the closest square input
/// to the published ResNet-18 figure.
#[test]
fn resnet_ops_by_input_size() {
    assert_eq!(total_at(RESNET18_SPEC, [3, 224, 224]), 3_624_653_312);
    assert_eq!(total_at(RESNET18_SPEC, [3, 352, 352]), 8_950_653_440);
    assert_eq!(total_at(RESNET50_SPEC, [3, 352, 352]), 20_158_061_056);
    let best = (200..=512)
        .map(|s| total_at(RESNET18_SPEC, [3, s, s]))
        .min_by_key(|t| t.abs_diff(9_100_000_000))
        .unwrap();
    assert_eq!(best, 8_950_653_440);
    assert_eq!(total_at(UNET_SMALL_SPEC, [1, 384, 384]), 216_341_544_960);
}

#[test]
fn large_attention_layer_matches_instrumented_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let att = RefAttention::random(1, 64, 7, &mut rng);
    let x = random(&[1, 1, 56, 56], &mut rng);
    let mut ctr = Counters::default();
    reference_attention(&x, &att, &mut ctr).unwrap();
    let spec = AttentionSpec::square(1, 64, 7).unwrap();
    let formula = attention_op_count(&spec, 56, 56);
    assert_eq!(formula.total.mul, 19_668_992);
    assert_eq!(ctr.attention(), formula.total);
    assert_eq!(ctr.embed_add, 49 * 64 * 3136);
}

#[test]
fn attention_op_grid_matches_instrumented_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in [1, 3, 5, 7] {
        for c in [1, 4, 8] {
            let att = RefAttention::random(3, c, b, &mut rng);
            let x = random(&[2, 3, 4, 6], &mut rng);
            let mut ctr = Counters::default();
            reference_attention(&x, &att, &mut ctr).unwrap();
            let spec = AttentionSpec {
                c_in: 3,
                c_out: c,
                window_h: b,
                window_w: b,
                padding: Padding::Zero,
            };
            let f = attention_op_count(&spec, 4, 6);
            assert_eq!(ctr.attention().mul, 2 * f.total.mul, "b={b} c={c}");
            assert_eq!(ctr.attention().add, 2 * f.total.add, "b={b} c={c}");
            assert_eq!(f.per_pixel.mul, 2 * (b * b * c) as u64);
        }
    }
}

#[test]
fn declared_layers_match_instrumented_counters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (ci, co) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let (k, stride, pad) = (rng.random_range(1..=4), rng.random_range(1..=2), rng.random_range(0..=2));
        let (h, w) = (rng.random_range(k..=8), rng.random_range(k..=8));
        let bias = rng.random_bool(0.5);
        let text = format!("conv2d out={co} kernel={k} stride={stride} padding={pad} bias={bias}");
        let layers = analyze_spec(&spec_of(&text), &[ci, h, w]).unwrap();
        let x = random(&[1, ci, h, w], &mut rng);
        let wt = random(&[co, ci, k, k], &mut rng);
        let b = random(&[co], &mut rng);
        let mut ctr = OpTally::default();
        let y = reference_conv2d(&x, &wt, bias.then_some(&b), stride, pad, &mut ctr).unwrap();
        assert_eq!(layers[0].ops(), ctr, "{text} on {ci}x{h}x{w}");
        assert_eq!(&layers[0].out_shape[..], &y.shape()[1..]);
        assert_eq!(layers[0].params, (co * ci * k * k + if bias { co } else { 0 }) as u64);

        let (d_in, d_out) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let layers = analyze_spec(&spec_of(&format!("linear out={d_out} bias={bias}")), &[d_in]).unwrap();
        let mut ctr = OpTally::default();
        let lb = random(&[d_out], &mut rng);
        reference_linear(&random(&[1, d_in], &mut rng), &random(&[d_out, d_in], &mut rng), bias.then_some(&lb), &mut ctr).unwrap();
        assert_eq!(layers[0].ops(), ctr);

        let c_out = 2 * rng.random_range(1..=3);
        let win = 2 * rng.random_range(0..=2) + 1;
        let layers = analyze_spec(&spec_of(&format!("attention out={c_out} window={win}")), &[ci, h, w]).unwrap();
        let mut ctr = Counters::default();
        reference_attention(&random(&[1, ci, h, w], &mut rng), &RefAttention::random(ci, c_out, win, &mut rng), &mut ctr).unwrap();
        assert_eq!(layers[0].ops(), ctr.attention());
    }
}

#[test]
fn toy_graphs_match_instrumented_forward() {
    for cfg in [ModelConfig::toy_cls(), ModelConfig::toy_seg()] {
        let net = NetworkGraph::build(&cfg).unwrap();
        let mut shape = vec![2];
        shape.extend_from_slice(net.input_shape());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
        let run = instrumented_forward(&net, &x).unwrap();
        let ops = graph_ops(&net).unwrap();
        assert_eq!(run.counters.counted().mul, 2 * ops.mul, "{}", cfg.task);
        assert_eq!(run.counters.counted().add, 2 * ops.add, "{}", cfg.task);
        let fast: Tensor<f64> = net.forward(&x).unwrap();
        let dev = fast.data().iter().zip(run.output.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev <= 1e-9, "{}: {dev}", cfg.task);
        for ((name, c), l) in run.layers.iter().skip(1).zip(&ops.layers) {
            assert_eq!(name, &l.name);
            assert_eq!(c.counted().mul, 2 * l.ops_mul, "{name}");
        }
    }
}

#[test]
fn graph_params_agree_with_model_and_archive() {
    for cfg in [ModelConfig::toy_cls(), ModelConfig::toy_seg()] {
        let net = NetworkGraph::build(&cfg).unwrap();
        let counted = graph_params(&net).unwrap();
        assert_eq!(counted, net.param_count());
        let bytes: usize = float_archive(&net)
            .iter()
            .filter(|(k, _)| k.as_str() != CONFIG_RECORD)
            .map(|(_, r)| {
                assert!(matches!(r.data, TensorData::F32(_)));
                r.data.nbytes()
            })
            .sum();
        assert_eq!(bytes as u64 / 4, counted);
    }
}

#[test]
fn toy_cls_report_matches_golden() {
    let net = NetworkGraph::build(&ModelConfig::toy_cls()).unwrap();
    let report = analyze("toy-cls", &spec_of_graph(&net), None, &EnergyTable::default()).unwrap();
    let text = render_report(&report, ReportFormat::Structured, true);
    assert_eq!(text, GOLDEN_TOY_CLS);
    assert_eq!(parse_report(&text).unwrap(), report);
    report.validate().unwrap();
}

#[test]
fn structured_report_fields() {
    let r = analyze("r18", &spec_of(RESNET18_SPEC), None, &EnergyTable::default()).unwrap();
    let text = render_report(&r, ReportFormat::Structured, false);
    let v: toml::Table = toml::from_str(&text).unwrap();
    for key in [
        "params",
        "ops_mul",
        "ops_add",
        "ops_total_paper_convention",
        "size_bytes_fp32",
        "size_bytes_int8",
        "energy_j_fp32",
        "energy_j_int8",
        "conventions",
        "layers",
    ] {
        assert!(v.contains_key(key), "{key}");
    }
    assert_eq!(r.size_bytes_fp32, 4 * r.params);
    assert_eq!(r.ops_total_paper_convention, r.ops_mul + r.ops_add);
    let human = render_report(&r, ReportFormat::Human, true);
    assert!(human.contains("mul+add"));
    assert!(!render_report(&r, ReportFormat::Human, false).contains("mul+add"));
}

#[test]
fn tampered_report_is_rejected() {
    let r = analyze("r18", &spec_of(RESNET18_SPEC), None, &EnergyTable::default()).unwrap();
    let text = render_report(&r, ReportFormat::Structured, false).replacen("params = 11183694", "params = 11183695", 1);
    assert!(parse_report(&text).is_err());
}

#[test]
fn energy_override_changes_report() {
    let t = EnergyTable::from_toml("[fp32]\nmul_pj = 7.4\nadd_pj = 1.8\n").unwrap();
    let spec = spec_of(RESNET18_SPEC);
    let a = analyze("r18", &spec, None, &EnergyTable::default()).unwrap();
    let b = analyze("r18", &spec, None, &t).unwrap();
    assert!((b.energy_j_fp32 / a.energy_j_fp32 - 2.0).abs() < 1e-12);
    assert_eq!(a.energy_j_int8, b.energy_j_int8);
}

#[test]
fn shape_errors_identify_layers() {
    let text = "input shape=3x8x8\nconv2d name=a out=4 kernel=3\nconcat name=bad from=a,input\n";
    match analyze("x", &spec_of(text), None, &EnergyTable::default()) {
        Err(Error::Shape { op, .. }) => assert!(op.contains("bad") && op.contains("line 3"), "{op}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_spec("transformer heads=8"), Err(Error::Parse { line: 1, .. })));
}
