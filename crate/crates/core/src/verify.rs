//! Acceptance checks and the pinned toy training recipes they use.
//!
//! [`run_verify`] produces a [`VerifyReport`] whose structured rendering
//! contains only deterministic values, so two runs compare byte for byte.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, attention_op_count, AttentionSpec, AttentionWeights, Padding};
use crate::autograd::{grad_check, Tape, Var};
use crate::checkpoint::{encode_checkpoint, Checkpoint};
use crate::cost::{analyze, energy_from_total, graph_ops, parse_spec, EnergyTable, Precision};
use crate::data::{synth_cls_dataset, synth_seg_dataset, Sample};
use crate::error::{Error, Result};
use crate::models::{batch, evaluate, evaluate_with, train, ModelConfig, NetworkGraph, Task, TrainOptions, TrainTrace};
use crate::quant::{calibrate_samples, compute_qparams, quantize_network, quantized_matmul, QuantParams, QuantizedNetwork, QuantizedTensor};
use crate::reference::{instrumented_forward, reference_attention, Counters, RefAttention};
use crate::tensor::Tensor;

pub const RESNET18_SPEC: &str = include_str!("../../../specs/resnet18.spec");
pub const RESNET50_SPEC: &str = include_str!("../../../specs/resnet50.spec");
pub const UNET_SMALL_SPEC: &str = include_str!("../../../specs/unet_small.spec");
pub const SUMNET_SPEC: &str = include_str!("../../../specs/sumnet.spec");

pub const ENERGY_TOL: f64 = 0.01;
pub const SIZE_TOL: f64 = 0.005;
pub const PARAM_TOL: f64 = 0.005;
pub const ATTENTION_REL_TOL: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const ROUND_TRIP_DRAWS: usize = 1_000_000;
pub const MATMUL_INSTANCES: usize = 100;
pub const SEG_MIN_DSC: f64 = 0.95;
pub const SEG_MAX_DROP: f64 = 0.03;
pub const CLS_MIN_ACCURACY: f64 = 0.95;
pub const CLS_MIN_AGREEMENT: f64 = 0.95;
pub const SIZE_RATIO_RANGE: (f64, f64) = (0.25, 0.30);

/// One published cost row: name, combined ops, fp32 size, and the energies
/// of the float and int8 variants. The published energies are numerically
/// millijoules: `ops/2 · (e_mul + e_add)` in pJ only matches them at 1e-3 J.
#[derive(Clone, Copy, Debug)]
pub struct PublishedRow {
    pub model: &'static str,
    pub params: f64,
    pub ops: f64,
    pub size_fp32: f64,
    /// Bytes per size unit the table uses.
    pub size_unit: f64,
    pub energy_fp32: f64,
    pub energy_int8: f64,
}

const MB: f64 = 1e6;
const MIB: f64 = 1_048_576.0;

pub const PUBLISHED: [PublishedRow; 6] = [
    PublishedRow { model: "ResNet-18", params: 11.17e6, ops: 9.10e9, size_fp32: 44.79, size_unit: MB, energy_fp32: 20.93, energy_int8: 1.04 },
    PublishedRow { model: "ResNet-50", params: 23.53e6, ops: 21.11e9, size_fp32: 94.45, size_unit: MB, energy_fp32: 48.53, energy_int8: 2.41 },
    PublishedRow { model: "SaDNN-cls", params: 4.56e6, ops: 3.10e9, size_fp32: 18.30, size_unit: MB, energy_fp32: 7.13, energy_int8: 0.35 },
    PublishedRow { model: "UNet-small", params: 31.03e6, ops: 218.60e9, size_fp32: 118.48, size_unit: MIB, energy_fp32: 502.78, energy_int8: 25.13 },
    PublishedRow { model: "SUMNet", params: 23.53e6, ops: 425.98e9, size_fp32: 91.07, size_unit: MIB, energy_fp32: 979.75, energy_int8: 48.97 },
    PublishedRow { model: "SaDNN-seg", params: 7.95e6, ops: 277.15e9, size_fp32: 30.47, size_unit: MIB, energy_fp32: 637.0, energy_int8: 31.87 },
];

/// A measured quantity with its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub label: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub measurements: Vec<Measurement>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("verify report: {e}")))
    }

    /// One PASS/FAIL line per check, followed by its failing measurements.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{} {:>2} {}", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name);
            for m in c.measurements.iter().filter(|m| !m.passed) {
                let _ = writeln!(s, "       {}: {} (needs {})", m.label, m.value, m.bound);
            }
        }
        s
    }
}

struct Check {
    id: u32,
    name: &'static str,
    measurements: Vec<Measurement>,
}

impl Check {
    fn new(id: u32, name: &'static str) -> Self {
        Self {
            id,
            name,
            measurements: vec![],
        }
    }

    fn at_most(&mut self, label: impl Into<String>, value: f64, bound: f64) {
        self.push(label, value, format!("<= {bound}"), value <= bound);
    }

    fn at_least(&mut self, label: impl Into<String>, value: f64, bound: f64) {
        self.push(label, value, format!(">= {bound}"), value >= bound);
    }

    fn equal(&mut self, label: impl Into<String>, value: u64, expected: u64) {
        self.push(label, value as f64, format!("== {expected}"), value == expected);
    }

    fn push(&mut self, label: impl Into<String>, value: f64, bound: String, passed: bool) {
        self.measurements.push(Measurement {
            label: label.into(),
            value,
            bound,
            passed: passed && value.is_finite(),
        });
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            id: self.id,
            name: self.name.into(),
            passed: !self.measurements.is_empty() && self.measurements.iter().all(|m| m.passed),
            measurements: self.measurements,
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// A pinned toy experiment: data generation, training and quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRecipe {
    pub config: ModelConfig,
    pub train_n: usize,
    pub train_seed: u64,
    pub test_n: usize,
    pub test_seed: u64,
    pub calib_n: usize,
    pub train: TrainOptions,
}

impl ToyRecipe {
    pub fn cls() -> Self {
        Self {
            config: ModelConfig::toy_cls(),
            train_n: 3000,
            train_seed: 1,
            test_n: 200,
            test_seed: 1001,
            calib_n: 128,
            train: TrainOptions {
                epochs: 15,
                lr: 3e-3,
                batch_size: 8,
                seed: 1,
            },
        }
    }

    pub fn seg() -> Self {
        Self {
            config: ModelConfig::toy_seg(),
            train_n: 200,
            train_seed: 1,
            test_n: 100,
            test_seed: 1001,
            calib_n: 64,
            train: TrainOptions {
                epochs: 25,
                lr: 3e-3,
                batch_size: 8,
                seed: 1,
            },
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Cls => Self::cls(),
            Task::Seg => Self::seg(),
        }
    }

    pub fn dataset(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        dataset(&self.config, n, seed)
    }
}

/// Synthetic samples matching a model config.
pub fn dataset(config: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let size = config.input[1];
    if config.input[2] != size || config.input[0] != 1 {
        return Err(Error::Config(format!("synthetic data needs a square single-channel input, got {:?}", config.input)));
    }
    match config.task {
        Task::Cls => synth_cls_dataset(n, size, config.num_classes, seed),
        Task::Seg => synth_seg_dataset(n, size, seed),
    }
}

/// Results of running a recipe end to end.
#[derive(Clone, Debug)]
pub struct ToyRun {
    pub net: NetworkGraph,
    pub quantized: QuantizedNetwork,
    pub trace: TrainTrace,
    pub float_metric: f64,
    pub quant_metric: f64,
    /// Fraction of test samples whose largest output is the same label in
    /// both paths (classification only).
    pub argmax_agreement: Option<f64>,
    pub float_bytes: usize,
    pub quant_bytes: usize,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax agrees between two `N × L` outputs.
pub fn argmax_agreement(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b, "argmax agreement")?;
    let n = a.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("argmax agreement of an empty batch".into()));
    }
    let l = a.len() / n;
    let same = (0..n)
        .filter(|&i| argmax(&a.data()[i * l..(i + 1) * l]) == argmax(&b.data()[i * l..(i + 1) * l]))
        .count();
    Ok(same as f64 / n as f64)
}

pub fn run_recipe(recipe: &ToyRecipe) -> Result<ToyRun> {
    let data = recipe.dataset(recipe.train_n, recipe.train_seed)?;
    let test = recipe.dataset(recipe.test_n, recipe.test_seed)?;
    let mut net = NetworkGraph::build(&recipe.config)?;
    let trace = train(&mut net, &data, &recipe.train)?;
    let stats = calibrate_samples(&net, &data[..recipe.calib_n.min(data.len())], 32)?;
    let quantized = quantize_network(&net, &stats)?;
    let bs = 32;
    let float_metric = evaluate(&net, &test, bs)?;
    let quant_metric = evaluate_with(net.config.task, &test, bs, |x| quantized.predict(x))?;
    let argmax_agreement = match net.config.task {
        Task::Cls => {
            let refs: Vec<&Sample> = test.iter().collect();
            let (x, _) = batch(&refs)?;
            Some(argmax_agreement(&net.forward(&x)?, &quantized.forward(&x)?)?)
        }
        Task::Seg => None,
    };
    let float_bytes = encode_checkpoint(&Checkpoint::Float(net.clone()))?.len();
    let quant_bytes = encode_checkpoint(&Checkpoint::Quantized(quantized.clone()))?.len();
    Ok(ToyRun {
        net,
        quantized,
        trace,
        float_metric,
        quant_metric,
        argmax_agreement,
        float_bytes,
        quant_bytes,
    })
}

#[derive(Clone, Debug)]
#[derive(Default)]
pub struct VerifyOptions {
    /// Check ids to run; `None` runs all ten.
    pub only: Option<BTreeSet<u32>>,
    pub energy: EnergyTable,
}


impl VerifyOptions {
    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(&id))
    }
}

pub const CHECK_IDS: std::ops::RangeInclusive<u32> = 1..=10;

/// Runs the selected checks. Check 10 reruns all other selected checks and
/// compares the structured reports byte for byte.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if let Some(bad) = opts.only.iter().flatten().find(|id| !CHECK_IDS.contains(id)) {
        return Err(Error::Config(format!("no check {bad}; checks are numbered 1 to 10")));
    }
    let first = run_once(opts)?;
    let mut report = first.clone();
    if opts.wants(10) {
        let second = run_once(opts)?;
        let mut c = Check::new(10, "determinism: repeated runs give byte-identical reports");
        let (a, b) = (first.to_toml(), second.to_toml());
        let differing = a.lines().zip(b.lines()).filter(|(x, y)| x != y).count() + a.lines().count().abs_diff(b.lines().count());
        c.equal("differing report lines", differing as u64, 0);
        c.equal("report bytes", b.len() as u64, a.len() as u64);
        report.checks.push(c.finish());
    }
    Ok(report)
}

fn run_once(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if opts.wants(1) {
        checks.push(check_energy(&opts.energy));
    }
    if opts.wants(2) {
        checks.push(check_sizes());
    }
    if opts.wants(3) {
        checks.push(check_baseline_params()?);
    }
    if opts.wants(4) {
        checks.push(check_op_counts()?);
    }
    if opts.wants(5) {
        checks.push(check_attention()?);
    }
    if opts.wants(6) {
        checks.push(check_gradients()?);
    }
    if opts.wants(7) {
        checks.push(check_quantization()?);
    }
    let (cls, seg) = if opts.wants(8) || opts.wants(9) {
        (Some(run_recipe(&ToyRecipe::cls())?), Some(run_recipe(&ToyRecipe::seg())?))
    } else {
        (None, None)
    };
    if let (true, Some(cls), Some(seg)) = (opts.wants(8), &cls, &seg) {
        let mut c = Check::new(8, "toy end-to-end: trained metrics and int8 degradation");
        c.at_least("seg float DSC", seg.float_metric, SEG_MIN_DSC);
        c.at_most("seg DSC drop after int8", seg.float_metric - seg.quant_metric, SEG_MAX_DROP);
        c.at_least("cls float subset accuracy", cls.float_metric, CLS_MIN_ACCURACY);
        c.at_least("cls int8 argmax agreement", cls.argmax_agreement.unwrap_or(f64::NAN), CLS_MIN_AGREEMENT);
        c.push("cls int8 subset accuracy", cls.quant_metric, "reported".into(), true);
        c.push("seg int8 DSC", seg.quant_metric, "reported".into(), true);
        checks.push(c.finish());
    }
    if let (true, Some(cls), Some(seg)) = (opts.wants(9), &cls, &seg) {
        let mut c = Check::new(9, "int8 checkpoint size ratio");
        let (lo, hi) = SIZE_RATIO_RANGE;
        let ratio = |run: &ToyRun| run.quant_bytes as f64 / run.float_bytes as f64;
        c.push("cls int8/fp32 checkpoint bytes", ratio(cls), format!("in [{lo}, {hi}]"), (lo..=hi).contains(&ratio(cls)));
        c.push("seg int8/fp32 checkpoint bytes", ratio(seg), "reported".into(), true);
        checks.push(c.finish());
    }
    Ok(VerifyReport { checks })
}

fn check_energy(table: &EnergyTable) -> CheckResult {
    let mut c = Check::new(1, "energy arithmetic against published rows");
    for r in PUBLISHED {
        for (p, want, label) in [(Precision::Fp32, r.energy_fp32, ""), (Precision::Int8, r.energy_int8, "q-")] {
            let got = energy_from_total(r.ops, table, p) * 1e3;
            c.at_most(format!("{label}{} relative energy error ({got:.4} mJ vs {want})", r.model), rel(got, want), ENERGY_TOL);
        }
    }
    c.finish()
}

fn check_sizes() -> CheckResult {
    let mut c = Check::new(2, "fp32 model size arithmetic against published rows");
    for r in PUBLISHED {
        let got = r.params * 4.0 / r.size_unit;
        let unit = if r.size_unit == MB { "MB" } else { "MiB" };
        c.at_most(
            format!("{} relative size error ({got:.2} {unit} vs {} {unit})", r.model, r.size_fp32),
            rel(got, r.size_fp32),
            SIZE_TOL,
        );
    }
    c.finish()
}

fn check_baseline_params() -> Result<CheckResult> {
    let mut c = Check::new(3, "baseline parameter counts");
    for (name, text, want) in [("ResNet-18", RESNET18_SPEC, 11.17e6), ("ResNet-50", RESNET50_SPEC, 23.53e6)] {
        let r = analyze(name, &parse_spec(text)?, None, &EnergyTable::default())?;
        c.at_most(format!("{name} relative param error ({} vs {want})", r.params), rel(r.params as f64, want), PARAM_TOL);
    }
    Ok(c.finish())
}

/// Raw attention spec; odd channel counts are fine for counting.
fn counting_spec(c_in: usize, c_out: usize, b: usize) -> AttentionSpec {
    AttentionSpec {
        c_in,
        c_out,
        window_h: b,
        window_w: b,
        padding: Padding::Zero,
    }
}

fn check_op_counts() -> Result<CheckResult> {
    let mut c = Check::new(4, "attention op formula equals instrumented counters");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (5, 6);
    for b in [1, 3, 5, 7] {
        for ch in [1, 4, 8] {
            let att = RefAttention::random(2, ch, b, &mut rng);
            let x = Tensor::from_fn(&[1, 2, h, w], |_| rng.random_range(-1.0..1.0));
            let mut ctr = Counters::default();
            reference_attention(&x, &att, &mut ctr)?;
            let formula = attention_op_count(&counting_spec(2, ch, b), h, w).total;
            c.equal(format!("b={b} c={ch} mul"), ctr.attention().mul, formula.mul);
            c.equal(format!("b={b} c={ch} add"), ctr.attention().add, formula.add);
        }
    }
    for cfg in [ModelConfig::toy_cls(), ModelConfig::toy_seg()] {
        let net = NetworkGraph::build(&cfg)?;
        let mut shape = vec![1];
        shape.extend_from_slice(net.input_shape());
        let x = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
        let run = instrumented_forward(&net, &x)?;
        let ops = graph_ops(&net)?;
        c.equal(format!("toy {} mul", cfg.task), run.counters.counted().mul, ops.mul);
        c.equal(format!("toy {} add", cfg.task), run.counters.counted().add, ops.add);
    }
    Ok(c.finish())
}

fn check_attention() -> Result<CheckResult> {
    let mut c = Check::new(5, "attention forward against the literal per-pixel oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for i in 0..12 {
        let (c_in, c_out, wh, ww, n, h, w) = if i == 0 {
            (4, 4, 3, 3, 1, 5, 5)
        } else {
            (
                rng.random_range(1..=4),
                2 * rng.random_range(1..=4),
                2 * rng.random_range(0..=3) + 1,
                2 * rng.random_range(0..=3) + 1,
                rng.random_range(1..=2),
                rng.random_range(3..=7),
                rng.random_range(3..=7),
            )
        };
        let spec = AttentionSpec::new(c_in, c_out, wh, ww)?;
        let weights: AttentionWeights<f64> = AttentionWeights::init(&spec, &mut rng);
        let x = Tensor::from_fn(&[n, c_in, h, w], |_| rng.random_range(-1.0..1.0));
        let y = attention_forward(&x, &spec, &weights)?;
        let r = reference_attention(&x, &RefAttention::from_weights(&spec, &weights), &mut Counters::default())?;
        let scale = r.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = y.data().iter().zip(r.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
        instances += 1;
    }
    c.at_most(format!("max relative deviation over {instances} instances"), worst, ATTENTION_REL_TOL);

    let spec = AttentionSpec::new(3, 4, 1, 1)?;
    let mut weights: AttentionWeights<f64> = AttentionWeights::init(&spec, &mut rng);
    weights.e_row = Tensor::zeros(weights.e_row.shape());
    weights.e_col = Tensor::zeros(weights.e_col.shape());
    let x = Tensor::from_fn(&[2, 3, 4, 3], |_| rng.random_range(-1.0..1.0));
    let y = attention_forward(&x, &spec, &weights)?;
    let mut mismatched = 0u64;
    for n in 0..2 {
        for o in 0..4 {
            for p in 0..12 {
                let mut v = 0.0;
                for ci in 0..3 {
                    v += weights.w_v.data()[o * 3 + ci] * x.data()[(n * 3 + ci) * 12 + p];
                }
                if y.data()[(n * 4 + o) * 12 + p] != v {
                    mismatched += 1;
                }
            }
        }
    }
    c.equal("1x1 window outputs differing from W_V x", mismatched, 0);
    Ok(c.finish())
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe_sum(t: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = t.input(probe.clone());
    let m = t.mul(y, p)?;
    Ok(t.sum(m))
}

fn check_gradients() -> Result<CheckResult> {
    let mut c = Check::new(6, "finite-difference gradient checks at float64");
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let spec = AttentionSpec::new(3, 4, 3, 5)?;
    let w: AttentionWeights<f64> = AttentionWeights::init(&spec, &mut rng);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let probe = random(&[2, 4, 4, 5], &mut rng);
    let names = ["w_q", "w_k", "w_v", "e_row", "e_col"];
    let params = |t: &mut Tape<f64>| -> [Var; 5] {
        let b = w.buffers();
        std::array::from_fn(|i| t.param(names[i], b[i].clone()))
    };
    let err = grad_check(
        |t, xv| {
            let p = params(t);
            let y = t.attention(xv, &spec, p)?;
            probe_sum(t, y, &probe)
        },
        &x,
        GRAD_STEP,
    )?;
    c.at_most("attention input", err, GRAD_TOL);
    for (slot, name) in names.iter().enumerate() {
        let err = grad_check(
            |t, pv| {
                let mut p = params(t);
                p[slot] = pv;
                let xv = t.input(x.clone());
                let y = t.attention(xv, &spec, p)?;
                probe_sum(t, y, &probe)
            },
            w.buffers()[slot],
            GRAD_STEP,
        )?;
        c.at_most(format!("attention {name}"), err, GRAD_TOL);
    }

    let (lx, lw, lb) = (random(&[3, 5], &mut rng), random(&[4, 5], &mut rng), random(&[4], &mut rng));
    let lprobe = random(&[3, 4], &mut rng);
    for (slot, name) in ["input", "weight", "bias"].iter().enumerate() {
        let target = [&lx, &lw, &lb][slot];
        let err = grad_check(
            |t, v| {
                let mut vars = [lx.clone(), lw.clone(), lb.clone()].map(|a| t.input(a));
                vars[slot] = v;
                let y = t.linear(vars[0], vars[1], vars[2])?;
                probe_sum(t, y, &lprobe)
            },
            target,
            GRAD_STEP,
        )?;
        c.at_most(format!("linear {name}"), err, GRAD_TOL);
    }

    let (pw, pb) = (random(&[2, 3], &mut rng), random(&[2], &mut rng));
    let px = random(&[2, 3, 2, 3], &mut rng);
    let pprobe = random(&[2, 2, 2, 3], &mut rng);
    let err = grad_check(
        |t, xv| {
            let (wv, bv) = (t.input(pw.clone()), t.input(pb.clone()));
            let y = t.project(xv, wv, bv)?;
            probe_sum(t, y, &pprobe)
        },
        &px,
        GRAD_STEP,
    )?;
    c.at_most("pixelwise projection input", err, GRAD_TOL);

    let x = random(&[2, 2, 4, 6], &mut rng);
    let probe = random(&[2, 4, 4, 6], &mut rng);
    let err = grad_check(
        |t, xv| {
            let pooled = t.maxpool(xv, 2, 2)?;
            let r = t.relu(pooled);
            let up = t.maxunpool(r, pooled)?;
            let cat = t.concat(&[up, xv], 1)?;
            probe_sum(t, cat, &probe)
        },
        &x,
        GRAD_STEP,
    )?;
    c.at_most("pool, relu, unpool, concat path", err, GRAD_TOL);

    let z = Tensor::from_fn(&[4, 3], |_| rng.random_range(-5.0..5.0));
    let tgt = Tensor::from_fn(&[4, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    c.at_most("binary cross-entropy", grad_check(|t, v| t.bce(v, tgt.clone()), &z, GRAD_STEP)?, GRAD_TOL);

    let p = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.2..0.8));
    let g = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    c.at_most("soft dice", grad_check(|t, v| t.soft_dice(v, g.clone()), &p, GRAD_STEP)?, GRAD_TOL);
    Ok(c.finish())
}

fn random_qparams(rng: &mut ChaCha8Rng) -> Result<QuantParams> {
    let lo = -rng.random_range(0.0..10.0f64);
    let hi = rng.random_range(1e-3..10.0f64);
    compute_qparams(lo, hi)
}

fn check_quantization() -> Result<CheckResult> {
    let mut c = Check::new(7, "quantization round trip, integer matmul and zero point");
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut worst = 0.0f64;
    let mut zero_misses = 0u64;
    for _ in 0..ROUND_TRIP_DRAWS {
        let qp = random_qparams(&mut rng)?;
        let (lo, hi) = qp.range();
        let r = rng.random_range(lo..=hi);
        let err = (qp.dequantize(qp.quantize(r)) - r).abs();
        worst = worst.max(err / (qp.scale / 2.0));
        if qp.dequantize(qp.zero_point as i8) != 0.0 {
            zero_misses += 1;
        }
    }
    c.at_most(format!("worst round-trip error over {ROUND_TRIP_DRAWS} draws, in units of S/2"), worst, 1.0);
    c.equal("draws where dequantize(Z) != 0", zero_misses, 0);

    let mut worst_q = 0u64;
    for _ in 0..MATMUL_INSTANCES {
        let (m, k, n) = (rng.random_range(1..=8), rng.random_range(1..=64), rng.random_range(1..=8));
        let (aq, bq) = (random_qparams(&mut rng)?, random_qparams(&mut rng)?);
        let a = QuantizedTensor {
            data: Tensor::from_fn(&[m, k], |_| rng.random_range(-128..=127i32) as i8),
            qparams: aq,
        };
        let b = QuantizedTensor {
            data: Tensor::from_fn(&[k, n], |_| rng.random_range(-128..=127i32) as i8),
            qparams: bq,
        };
        let bias: Tensor<i32> = Tensor::from_fn(&[n], |_| rng.random_range(-5000..=5000));
        let real: Vec<f64> = (0..m * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                let mut acc = 0.0;
                for p in 0..k {
                    acc += aq.dequantize(a.data.data()[i * k + p]) * bq.dequantize(b.data.data()[p * n + j]);
                }
                acc + bias.data()[j] as f64 * aq.scale * bq.scale
            })
            .collect();
        let lo = real.iter().cloned().fold(0.0f64, f64::min);
        let hi = real.iter().cloned().fold(0.0f64, f64::max);
        let out_qp = compute_qparams(lo, hi)?;
        let got = quantized_matmul(&a, &b, Some(&bias), out_qp)?;
        for (g, r) in got.data.data().iter().zip(&real) {
            worst_q = worst_q.max((*g as i64 - out_qp.quantize(*r) as i64).unsigned_abs());
        }
    }
    c.at_most(format!("worst quantized matmul deviation over {MATMUL_INSTANCES} instances, in quanta"), worst_q as f64, 1.0);
    Ok(c.finish())
}
