mod common;

use std::sync::Arc;

use common::*;
use ifmatch_core::featperturb::{PerturbOp, Strategy};
use ifmatch_core::{grad_check, LinearMap, NormMode, Tape, Tensor};
use ifmatch_oracle as oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Elementwise product with fixed weights, so `sum(weigh(y))` is `Σ w ⊙ y`.
#[derive(Debug)]
struct Weigh(Vec<f64>);

impl LinearMap for Weigh {
    fn name(&self) -> &'static str {
        "weigh"
    }

    fn apply(&self, x: &Tensor) -> ifmatch_core::Result<Tensor> {
        Tensor::new(x.shape(), x.data().iter().zip(&self.0).map(|(a, b)| a * b).collect())
    }

    fn adjoint(&self, g: &Tensor) -> ifmatch_core::Result<Tensor> {
        self.apply(g)
    }
}

fn weighted_sum(tape: &mut Tape, y: ifmatch_core::Var, w: &[f64]) -> ifmatch_core::Var {
    let m = tape.map(y, Arc::new(Weigh(w.to_vec()))).unwrap();
    tape.sum(m).unwrap()
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

struct ConvCase {
    x: Vec<f64>,
    xs: [usize; 4],
    k: Vec<f64>,
    ks: [usize; 4],
    stride: usize,
    pad: usize,
}

fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
    let kh = rng.random_range(1..=3);
    let kw = kh;
    let pad = rng.random_range(0..=1);
    let h = rng.random_range(kh.max(2)..=9);
    let w = rng.random_range(kw.max(2)..=9);
    let co = rng.random_range(1..=4);
    let xs = [n, c, h, w];
    let ks = [co, c, kh, kw];
    ConvCase {
        x: rand_vec(xs.iter().product(), rng),
        k: rand_vec(ks.iter().product(), rng),
        xs,
        ks,
        stride: rng.random_range(1..=2),
        pad,
    }
}

#[test]
fn conv_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c = conv_case(&mut rng);
        let (want, oshape) = oracle::conv2d(&c.x, c.xs, &c.k, c.ks, c.stride, c.pad).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&c.xs, c.x.clone()).unwrap(), false);
        let k = tape.leaf(Tensor::new(&c.ks, c.k.clone()).unwrap(), false);
        let y = tape.conv2d(x, k, c.stride, c.pad).unwrap();
        assert_eq!(tape.value(y).shape(), &oshape);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-12, "max |Δ| = {worst:e}");
}

#[test]
fn conv_gradients_match_finite_differences_of_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let c = conv_case(&mut rng);
        let (probe, _) = oracle::conv2d(&c.x, c.xs, &c.k, c.ks, c.stride, c.pad).unwrap();
        let r = rand_vec(probe.len(), &mut rng);
        let weighted = |xv: &[f64], kv: &[f64]| -> f64 {
            let (y, _) = oracle::conv2d(xv, c.xs, kv, c.ks, c.stride, c.pad).unwrap();
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let gx = oracle::finite_diff_grad(|xv| weighted(xv, &c.k), &c.x, 1e-6);
        let gk = oracle::finite_diff_grad(|kv| weighted(&c.x, kv), &c.k, 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&c.xs, c.x.clone()).unwrap(), true);
        let k = tape.leaf(Tensor::new(&c.ks, c.k.clone()).unwrap(), true);
        let y = tape.conv2d(x, k, c.stride, c.pad).unwrap();
        let s = weighted_sum(&mut tape, y, &r);
        tape.backward(s).unwrap();
        for (a, b) in tape.grad(x).unwrap().iter().zip(&gx) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "dx {a} vs {b}");
        }
        for (a, b) in tape.grad(k).unwrap().iter().zip(&gk) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "dk {a} vs {b}");
        }
    }
}

#[test]
fn softmax_and_cross_entropy_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (n, c) = (rng.random_range(1..=5), rng.random_range(2..=6));
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut target = vec![0.0; n * c];
        for i in 0..n {
            target[i * c + rng.random_range(0..c)] = 1.0;
        }
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(&[n, c], logits.clone()).unwrap(), false);
        let p = tape.softmax(z).unwrap();
        let weights = vec![1.0 / n as f64; n];
        let loss = tape
            .cross_entropy(&Tensor::new(&[n, c], target.clone()).unwrap(), p, &weights)
            .unwrap();
        let mut want = 0.0;
        for i in 0..n {
            let row = oracle::softmax_row(&logits[i * c..(i + 1) * c]);
            for (a, b) in tape.value(p).data()[i * c..(i + 1) * c].iter().zip(&row) {
                assert!((a - b).abs() < 1e-14);
            }
            want += oracle::cross_entropy(&target[i * c..(i + 1) * c], &row) / n as f64;
        }
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [NormMode::Sample, NormMode::Batch] {
        let x = Tensor::new(&[3, 2, 3, 3], rand_vec(54, &mut rng)).unwrap();
        let r = Tensor::new(&[3, 2, 3, 3], rand_vec(54, &mut rng)).unwrap();
        let report = grad_check(
            &[x, r],
            |t, v| {
                let y = t.normalize(v[0], mode)?;
                let z = t.add(y, v[1])?;
                let p = t.relu(z)?;
                let q = t.global_avg_pool(p)?;
                let f = t.flatten(q)?;
                let s = t.softmax(f)?;
                let target = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
                t.cross_entropy(&target, s, &[0.3, 0.3, 0.4])
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{mode:?}: {}", report.max_rel_error());
    }
}

#[test]
fn perturbation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &s in &Strategy::ALL {
        for _ in 0..10 {
            let shape = [2, 3, 5, 5];
            let f = random_tensor(shape, &mut rng);
            let w = random_tensor(shape, &mut rng);
            let d = draw(random_params(s, shape, &mut rng));
            let mask: Vec<bool> = (0..2).map(|_| rng.random()).collect();
            let twin_p = twin(&d.params, 5, 5);
            // d/df Σ w ⊙ perturb(f) computed purely by the oracle.
            let g_fd = oracle::finite_diff_grad(
                |fv| {
                    let out = oracle::perturb(fv, shape, &twin_p, Some(&mask)).unwrap();
                    out.iter().zip(w.data()).map(|(a, b)| a * b).sum()
                },
                f.data(),
                1e-6,
            );
            let op = Arc::new(PerturbOp {
                draw: d.clone(),
                mask: Some(mask.clone()),
            });
            let mut tape = Tape::new();
            let fv = tape.leaf(f.clone(), true);
            let y = tape.map(fv, op).unwrap();
            let total = weighted_sum(&mut tape, y, w.data());
            tape.backward(total).unwrap();
            for (a, b) in tape.grad(fv).unwrap().iter().zip(&g_fd) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{s}: {a} vs {b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_layer_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, c) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
        let x = Tensor::new(&[n, d], rand_vec(n * d, &mut rng)).unwrap();
        let w = Tensor::new(&[c, d], rand_vec(c * d, &mut rng)).unwrap();
        let b = Tensor::new(&[c], rand_vec(c, &mut rng)).unwrap();
        let report = grad_check(&[x, w, b], |t, v| {
            let z = t.linear(v[0], v[1], v[2])?;
            let p = t.softmax(z)?;
            let mut target = vec![0.0; n * c];
            for i in 0..n { target[i * c + i % c] = 1.0; }
            t.cross_entropy(&Tensor::new(&[n, c], target).unwrap(), p, &vec![1.0; n])
        }, 1e-5, 1e-6).unwrap();
        prop_assert!(report.passed, "{}", report.max_rel_error());
    }
}
