//! Finite-difference checks of every differentiable op at float64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadnn::attention::{AttentionSpec, AttentionWeights, Padding};
use sadnn::autograd::{grad_check, Tape, Var};
use sadnn::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random projection to a scalar so every output coordinate matters.
fn weighted_sum(t: &mut Tape<f64>, v: Var, rng: &mut ChaCha8Rng) -> sadnn::Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let w = t.input(random(&shape, rng));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn attention_params(t: &mut Tape<f64>, w: &AttentionWeights<f64>, prefix: &str) -> [Var; 5] {
    [
        t.param(format!("{prefix}.w_q"), w.w_q.clone()),
        t.param(format!("{prefix}.w_k"), w.w_k.clone()),
        t.param(format!("{prefix}.w_v"), w.w_v.clone()),
        t.param(format!("{prefix}.e_row"), w.e_row.clone()),
        t.param(format!("{prefix}.e_col"), w.e_col.clone()),
    ]
}

#[test]
fn attention_input_gradient() {
    for seed in 0..3 {
        for padding in [Padding::Zero, Padding::Wrap] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = AttentionSpec::new(3, 4, 3, 5).unwrap().with_padding(padding);
            let w = AttentionWeights::init(&spec, &mut rng);
            let x = random(&[2, 3, 4, 5], &mut rng);
            let probe = random(&[2, 4, 4, 5], &mut rng);
            let err = grad_check(
                |t, xv| {
                    let params = attention_params(t, &w, "a");
                    let y = t.attention(xv, &spec, params)?;
                    let p = t.input(probe.clone());
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &x,
                STEP,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed} {padding:?}: {err}");
        }
    }
}

#[test]
fn attention_weight_gradients() {
    let names = ["w_q", "w_k", "w_v", "e_row", "e_col"];
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let spec = AttentionSpec::square(2, 6, 3).unwrap();
        let w = AttentionWeights::init(&spec, &mut rng);
        let x = random(&[1, 2, 5, 4], &mut rng);
        let probe = random(&[1, 6, 5, 4], &mut rng);
        for (slot, name) in names.iter().enumerate() {
            let target = w.buffers()[slot].clone();
            let err = grad_check(
                |t, pv| {
                    let mut params = attention_params(t, &w, "a");
                    params[slot] = pv;
                    let xv = t.input(x.clone());
                    let y = t.attention(xv, &spec, params)?;
                    let p = t.input(probe.clone());
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &target,
                STEP,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed} {name}: {err}");
        }
    }
}

#[test]
fn two_layer_attention_network() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let s1 = AttentionSpec::square(2, 4, 3).unwrap();
        let s2 = AttentionSpec::square(4, 2, 3).unwrap();
        let w1 = AttentionWeights::init(&s1, &mut rng);
        let w2 = AttentionWeights::init(&s2, &mut rng);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let probe_rng = ChaCha8Rng::seed_from_u64(seed);
        let target = w1.w_k.clone();
        let err = grad_check(
            |t, pv| {
                let mut p1 = attention_params(t, &w1, "l1");
                p1[1] = pv;
                let p2 = attention_params(t, &w2, "l2");
                let xv = t.input(x.clone());
                let h = t.attention(xv, &s1, p1)?;
                let h = t.relu(h);
                let y = t.attention(h, &s2, p2)?;
                let mut r = probe_rng.clone();
                weighted_sum(t, y, &mut r)
            },
            &target,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn linear_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random(&[3, 5], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let b = random(&[4], &mut rng);
        let probe = random(&[3, 4], &mut rng);
        let build = |xv: Tensor<f64>, wv: Tensor<f64>, bv: Tensor<f64>, t: &mut Tape<f64>, which: Var, slot: usize| {
            let vars = [
                if slot == 0 { which } else { t.input(xv) },
                if slot == 1 { which } else { t.input(wv) },
                if slot == 2 { which } else { t.input(bv) },
            ];
            let y = t.linear(vars[0], vars[1], vars[2])?;
            let p = t.input(probe.clone());
            let m = t.mul(y, p)?;
            Ok(t.sum(m))
        };
        for (slot, target) in [&x, &w, &b].into_iter().enumerate() {
            let err = grad_check(|t, v| build(x.clone(), w.clone(), b.clone(), t, v, slot), target, STEP).unwrap();
            assert!(err <= TOL, "slot {slot}: {err}");
        }
    }
}

#[test]
fn projection_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(350);
    let x = random(&[2, 3, 2, 3], &mut rng);
    let w = random(&[2, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let probe = random(&[2, 2, 2, 3], &mut rng);
    let err = grad_check(
        |t, xv| {
            let wv = t.input(w.clone());
            let bv = t.input(b.clone());
            let y = t.project(xv, wv, bv)?;
            let p = t.input(probe.clone());
            let m = t.mul(y, p)?;
            Ok(t.sum(m))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn pooling_path_gradients() {
    // pool -> relu -> unpool -> concat with skip -> weighted sum
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = random(&[2, 2, 4, 6], &mut rng);
        let probe = random(&[2, 4, 4, 6], &mut rng);
        let err = grad_check(
            |t, xv| {
                let pooled = t.maxpool(xv, 2, 2)?;
                let r = t.relu(pooled);
                let up = t.maxunpool(r, pooled)?;
                let cat = t.concat(&[up, xv], 1)?;
                let p = t.input(probe.clone());
                let m = t.mul(cat, p)?;
                Ok(t.sum(m))
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn bce_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let z = Tensor::from_fn(&[4, 3], |_| rng.random_range(-5.0..5.0));
        let t = Tensor::from_fn(&[4, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let err = grad_check(|tape, v| tape.bce(v, t.clone()), &z, STEP).unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn soft_dice_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let logits = random(&[2, 1, 4, 4], &mut rng).map(|v| 3.0 * v);
        let g = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        // Through the sigmoid so perturbations stay inside [0, 1].
        let err = grad_check(
            |tape, v| {
                let p = tape.sigmoid(v);
                tape.soft_dice(p, g.clone())
            },
            &logits,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");

        let p = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.2..0.8));
        let err = grad_check(|tape, v| tape.soft_dice(v, g.clone()), &p, STEP).unwrap();
        assert!(err <= TOL, "direct seed {seed}: {err}");
    }
}
