mod common;

use clipforge::tensor::{Graph, Tensor};
use common::ops::{clip_loss_composed, full_model, OP_CHECKS};
use common::{rng, uniform};

#[test]
fn every_op_matches_finite_differences() {
    for &(name, check) in OP_CHECKS {
        for seed in 0..5 {
            let err = check(seed);
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err:.3e}");
        }
    }
}

#[test]
fn composed_clip_loss_matches_finite_differences() {
    for seed in 0..5 {
        let err = clip_loss_composed(seed);
        assert!(err < 1e-3, "seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn full_dual_encoder_matches_finite_differences() {
    let (err, checked) = full_model(11);
    assert!(checked > 1000, "only {checked} coordinates");
    assert!(err < 1e-3, "relative error {err:.3e}");
}

// y = a*b + a*c with `a` shared, against the expanded a*(b+c)
#[test]
fn fan_out_accumulates() {
    let mut r = rng(3);
    let (a, b, c) = (uniform(&mut r, &[2, 3]), uniform(&mut r, &[2, 3]), uniform(&mut r, &[2, 3]));

    let mut g = Graph::<f64>::new();
    let (va, vb, vc) = (g.param(a.clone()), g.param(b.clone()), g.param(c.clone()));
    let ab = g.mul(va, vb).unwrap();
    let ac = g.mul(va, vc).unwrap();
    let s = g.add(ab, ac).unwrap();
    let y = g.sum(s);
    g.backward(y).unwrap();
    let shared = g.grad(va).unwrap().to_vec();

    let mut h = Graph::<f64>::new();
    let (ha, hb, hc) = (h.param(a), h.constant(b), h.constant(c));
    let bc = h.add(hb, hc).unwrap();
    let p = h.mul(ha, bc).unwrap();
    let y = h.sum(p);
    h.backward(y).unwrap();
    let expanded = h.grad(ha).unwrap();

    for (x, e) in shared.iter().zip(expanded) {
        assert!((x - e).abs() < 1e-12, "{x} vs {e}");
    }
}

#[test]
fn repeated_backward_does_not_accumulate_across_calls() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq);
    g.backward(y).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), first.as_slice());
    assert_eq!(first, vec![2.0, -4.0, 1.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(5);
        let mut g = Graph::<f32>::new();
        let a = g.param(uniform(&mut r, &[4, 8, 16]).cast());
        let b = g.param(uniform(&mut r, &[16, 8]).cast());
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m);
        let y = g.gelu(s);
        let l = g.mean(y);
        g.backward(l).unwrap();
        (g.value(m).data().to_vec(), g.grad(a).unwrap().to_vec())
    };
    let (x, gx) = run();
    let (y, gy) = run();
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(gx.iter().zip(&gy).all(|(p, q)| p.to_bits() == q.to_bits()));
}
