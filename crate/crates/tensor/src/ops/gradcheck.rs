//! Finite-difference checks of every backward rule.

use std::sync::Arc;

use super::*;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn pseudo(shape: &[usize], seed: u32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(2_654_435_761).wrapping_add(12345);
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s as f32 / u32::MAX as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Projects the output onto fixed pseudo-random weights so every output
/// element contributes to the scalar being differentiated.
fn project<'t>(out: &Var<'t>) -> Var<'t> {
    let w = out.tape().constant(pseudo(out.shape(), 999));
    out.mul(&w).sum()
}

fn check(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(Arc::new(t.clone()))).collect();
    let out = project(&f(&tape, &vars));
    let grads = tape.backward(&out);
    let h = 1e-2f32;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[k]).expect("missing gradient").clone();
        for i in 0..input.numel() {
            let eval = |delta: f32| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        tape.constant(t)
                    })
                    .collect();
                project(&f(&tape, &vars)).value().item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let tol = 2e-2 * a.abs().max(numeric.abs()) + 2e-3;
            assert!(
                (a - numeric).abs() <= tol,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_rules() {
    let a = pseudo(&[3, 4], 1);
    let b = pseudo(&[3, 4], 2);
    check(&[a.clone(), b.clone()], |_, v| v[0].add(&v[1]).mul(&v[1]).sub(&v[0]));
    check(std::slice::from_ref(&a), |_, v| v[0].gelu());
    check(std::slice::from_ref(&a), |_, v| {
        v[0].sigmoid().scale(3.0).add_scalar(1.0)
    });
    check(&[a.clone(), b.clone()], |_, v| v[0].mse(&v[1]));
    check(&[a.clone(), pseudo(&[4], 3)], |_, v| v[0].add_broadcast(&v[1]));
    check(&[a.map(|x| x + 0.05 * x.signum())], |_, v| v[0].relu());
}

#[test]
fn linear_algebra_rules() {
    let x = pseudo(&[2, 3, 5], 4);
    let w = pseudo(&[4, 5], 5);
    let b = pseudo(&[4], 6);
    check(&[x, w, b], |_, v| v[0].linear(&v[1], Some(&v[2])));
    check(&[pseudo(&[3, 2], 7), pseudo(&[2, 4], 8)], |_, v| {
        v[0].matmul(&v[1]).transpose()
    });
}

#[test]
fn normalization_rules() {
    let x = pseudo(&[3, 6], 9);
    let g = pseudo(&[6], 10);
    let b = pseudo(&[6], 11);
    check(&[x, g, b], |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5));
    check(
        &[pseudo(&[2, 3, 2, 1], 12), pseudo(&[2], 13), pseudo(&[2], 14)],
        |_, v| v[0].channel_affine(&v[1], &v[2]),
    );
    check(&[pseudo(&[4, 5], 15)], |_, v| v[0].cross_entropy_logits(&[0, 4, 2, 2]));
}

#[test]
fn attention_rules() {
    let q = pseudo(&[3, 4], 16);
    let k = pseudo(&[5, 4], 17);
    let v = pseudo(&[5, 4], 18);
    check(&[q, k, v], |_, x| attention(&x[0], &x[1], &x[2], 2, false));
    let s = pseudo(&[4, 6], 19);
    check(&[s.clone(), s.map(|x| x * 0.5), s.map(|x| -x)], |_, x| {
        attention(&x[0], &x[1], &x[2], 3, true)
    });
}

#[test]
fn shape_rules() {
    let a = pseudo(&[2, 3], 20);
    let b = pseudo(&[4, 3], 21);
    check(&[a.clone(), b.clone()], |_, v| {
        concat_rows(&[v[0].clone(), v[1].clone()]).narrow_rows(1, 4)
    });
    check(std::slice::from_ref(&b), |_, v| v[0].gather_rows(&[3, 0, 3]));
    check(std::slice::from_ref(&b), |_, v| v[0].narrow_cols(1, 2));
    let idx = Arc::new(vec![5, 0, 0, 2, 11, 7]);
    check(std::slice::from_ref(&b), move |_, v| {
        v[0].gather_flat(idx.clone(), [2, 3])
    });
    check(&[a.clone(), a.map(|x| x * 2.0)], |_, v| mean_of(v).reshape([3, 2]));
}

#[test]
fn conv3d_rules() {
    let x = pseudo(&[2, 4, 4, 4], 22);
    check(&[x.clone(), pseudo(&[3, 2, 3, 3, 3], 23), pseudo(&[3], 24)], |_, v| {
        v[0].conv3d(&v[1], Some(&v[2]), ConvGeom::cube(3, 1, 1))
    });
    check(&[x, pseudo(&[3, 2, 4, 4, 4], 25)], |_, v| {
        v[0].conv3d(&v[1], None, ConvGeom::cube(4, 2, 1))
    });
}

#[test]
fn conv_transpose3d_rules() {
    check(
        &[
            pseudo(&[2, 2, 2, 2], 26),
            pseudo(&[2, 3, 4, 4, 4], 27),
            pseudo(&[3], 28),
        ],
        |_, v| v[0].conv_transpose3d(&v[1], Some(&v[2]), ConvGeom::cube(4, 2, 1)),
    );
}

#[test]
fn max_pool_rules() {
    // Distinct, well-separated values so the finite-difference step never flips an argmax.
    let x = Tensor::from_vec([2, 1, 4, 4], (0..32).map(|i| ((i * 13) % 32) as f32 * 0.1).collect());
    check(&[x], |_, v| v[0].max_pool3d(ConvGeom::planar(3, 2, 1)));
}

#[test]
fn straight_through_passes_gradient() {
    let tape = Tape::new();
    let z = tape.leaf(Arc::new(pseudo(&[2, 2], 29)));
    let q = z.straight_through(Tensor::ones([2, 2]));
    assert_eq!(q.value().data(), &[1.0; 4]);
    let grads = tape.backward(&q.scale(2.0).sum());
    assert_eq!(grads.get(&z).unwrap().data(), &[2.0; 4]);
}
